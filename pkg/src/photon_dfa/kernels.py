"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is chosen once at import from ``PHOTON_DFA_NUMBA`` (``0`` selects
numpy; anything else selects numba when it imports). Both backends accumulate
in the same order, so they agree bit for bit; ``tests/test_kernels.py`` checks
this and ``benchmarks/bench_kernels.py`` times them against each other.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA and os.environ.get("PHOTON_DFA_NUMBA", "1") != "0" else "numpy"


# ---------------------------------------------------------------------------
# numpy versions


def _matvec_np(W, a, b):
    # Column sweep: row i accumulates W[i,0]a[0] + W[i,1]a[1] + ... left to right.
    acc = np.zeros(W.shape[0])
    for j in range(W.shape[1]):
        acc = acc + W[:, j] * a[j]
    return acc + b


def _complex_intensity_np(tr, ti, x):
    re = np.zeros(tr.shape[0])
    im = np.zeros(tr.shape[0])
    for j in range(tr.shape[1]):
        if x[j] != 0.0:
            re = re + tr[:, j] * x[j]
            im = im + ti[:, j] * x[j]
    return re * re + im * im


def _ternary_split_np(ehat, t):
    if t > 0.0:
        plus = (ehat >= t).astype(np.float64)
        minus = (ehat <= -t).astype(np.float64)
    else:
        plus = (ehat > 0.0).astype(np.float64)
        minus = (ehat < 0.0).astype(np.float64)
    return plus, minus


def _linear_recovery_np(i_anchor, i_e, i_diff):
    return (i_anchor + i_e - i_diff) / (2.0 * np.sqrt(i_anchor))


def _sin_weighted_mean_np(y):
    H, W = y.shape
    total = 0.0
    for i in range(H):
        w = np.sin(np.pi * (i + 1) / H)
        row = 0.0
        for j in range(W):
            row = row + w * y[i, j]
        total = total + row
    return total / (H * W)


# ---------------------------------------------------------------------------
# numba versions

if HAVE_NUMBA:

    @njit(cache=True)
    def _matvec_nb(W, a, b):
        n, m = W.shape
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc += W[i, j] * a[j]
            out[i] = acc + b[i]
        return out

    @njit(cache=True)
    def _complex_intensity_nb(tr, ti, x):
        n, m = tr.shape
        out = np.empty(n)
        for i in range(n):
            re = 0.0
            im = 0.0
            for j in range(m):
                if x[j] != 0.0:
                    re += tr[i, j] * x[j]
                    im += ti[i, j] * x[j]
            out[i] = re * re + im * im
        return out

    @njit(cache=True)
    def _ternary_split_nb(ehat, t):
        n = ehat.shape[0]
        plus = np.zeros(n)
        minus = np.zeros(n)
        for i in range(n):
            v = ehat[i]
            if t > 0.0:
                if v >= t:
                    plus[i] = 1.0
                elif v <= -t:
                    minus[i] = 1.0
            else:
                if v > 0.0:
                    plus[i] = 1.0
                elif v < 0.0:
                    minus[i] = 1.0
        return plus, minus

    @njit(cache=True)
    def _linear_recovery_nb(i_anchor, i_e, i_diff):
        n = i_anchor.shape[0]
        out = np.empty(n)
        for i in range(n):
            out[i] = (i_anchor[i] + i_e[i] - i_diff[i]) / (2.0 * np.sqrt(i_anchor[i]))
        return out

    @njit(cache=True)
    def _sin_weighted_mean_nb(y):
        H, W = y.shape
        total = 0.0
        for i in range(H):
            w = np.sin(np.pi * (i + 1) / H)
            row = 0.0
            for j in range(W):
                row = row + w * y[i, j]
            total = total + row
        return total / (H * W)


_IMPLS = {
    "numpy": {
        "matvec": _matvec_np,
        "complex_intensity": _complex_intensity_np,
        "ternary_split": _ternary_split_np,
        "linear_recovery": _linear_recovery_np,
        "sin_weighted_mean": _sin_weighted_mean_np,
    },
}
if HAVE_NUMBA:
    _IMPLS["numba"] = {
        "matvec": _matvec_nb,
        "complex_intensity": _complex_intensity_nb,
        "ternary_split": _ternary_split_nb,
        "linear_recovery": _linear_recovery_nb,
        "sin_weighted_mean": _sin_weighted_mean_nb,
    }


def get(name, backend=None):
    """Return kernel ``name`` for ``backend`` (default: the active backend)."""
    return _IMPLS[backend or BACKEND][name]


def set_backend(name):
    global BACKEND
    if name not in _IMPLS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    BACKEND = name


def available_backends():
    return sorted(_IMPLS)


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matvec(W, a, b):
    return get("matvec")(_f64(W), _f64(a), _f64(b))


def complex_intensity(tr, ti, x):
    return get("complex_intensity")(_f64(tr), _f64(ti), _f64(x))


def ternary_split(ehat, t):
    return get("ternary_split")(_f64(ehat), float(t))


def linear_recovery(i_anchor, i_e, i_diff):
    return get("linear_recovery")(_f64(i_anchor), _f64(i_e), _f64(i_diff))


def sin_weighted_mean(y):
    return float(get("sin_weighted_mean")(_f64(y)))
