"""Simulated optical processing unit.

A coherent beam shaped by a binary modulator passes through a scattering
medium (a complex Gaussian transmission matrix) and a camera records output
intensities. Linear projections are recovered from three intensity patterns
using a fixed binary anchor input, errors are ternarized into two binary
frames, and noise/drift of the medium and camera are modelled.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import DimensionError, UndefinedCorrelationError, cosine_similarity, pearson_correlation

ANCHOR_FLOOR = 1e-12
NOISE_KINDS = ("none", "tm_noise", "measurement_noise", "drift")


class DegenerateAnchorError(RuntimeError):
    """An output pixel receives (almost) no light from the anchor input."""


class NoiseKindError(ValueError):
    pass


class ThresholdNotSetError(RuntimeError):
    pass


@dataclass
class TransmissionMatrix:
    real: np.ndarray
    imag: np.ndarray
    seed: int | None = None

    @property
    def rows(self):
        return self.real.shape[0]

    @property
    def cols(self):
        return self.real.shape[1]

    def as_complex(self):
        return self.real + 1j * self.imag

    def copy(self):
        return TransmissionMatrix(self.real.copy(), self.imag.copy(), self.seed)


def sample_transmission_matrix(rows: int, cols: int, seed: int) -> TransmissionMatrix:
    """I.i.d. circular complex Gaussian entries with unit variance (each part N(0, 1/2))."""
    if rows < 1 or cols < 1:
        raise DimensionError(f"transmission matrix needs positive dimensions, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    sd = math.sqrt(0.5)
    real = rng.normal(0.0, sd, size=(rows, cols))
    imag = rng.normal(0.0, sd, size=(rows, cols))
    return TransmissionMatrix(real, imag, seed)


@dataclass
class AnchorVector:
    r: np.ndarray
    seed: int | None = None


def make_anchor(cols: int, seed: int) -> AnchorVector:
    rng = np.random.default_rng(seed)
    r = (rng.random(cols) < 0.5).astype(np.float64)
    if not r.any():
        r[rng.integers(cols)] = 1.0
    return AnchorVector(r, seed)


@dataclass
class TernaryCode:
    e_plus: np.ndarray
    e_minus: np.ndarray
    threshold: float
    scale: float

    @property
    def values(self):
        return self.e_plus - self.e_minus

    def dense(self):
        return self.scale * (self.e_plus - self.e_minus)


def ternarize(e, t: float) -> TernaryCode:
    """Split ``e / max|e|`` into binary positive and negative frames at threshold ``t``.

    An entry goes to ``e_plus`` when it is >= t and to ``e_minus`` when it is
    <= -t. At ``t == 0`` exact zeros are assigned to neither frame.
    """
    e = np.asarray(e, dtype=np.float64).ravel()
    m = float(np.max(np.abs(e))) if e.size else 0.0
    scale = m if m > 0.0 else 1.0
    plus, minus = kernels.ternary_split(e / scale, t)
    return TernaryCode(plus, minus, float(t), scale)


def ternarize_rows(E, t: float):
    """Row-wise ternarization of a batch. Returns ``(values, scales)``."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    m = np.max(np.abs(E), axis=1)
    scales = np.where(m > 0.0, m, 1.0)
    ehat = E / scales[:, None]
    if t > 0.0:
        vals = (ehat >= t).astype(np.float64) - (ehat <= -t).astype(np.float64)
    else:
        vals = np.sign(ehat)
    return vals, scales


@dataclass
class NoiseSpec:
    kind: str = "none"
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise NoiseKindError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @property
    def active(self):
        return self.kind != "none" and self.sigma > 0.0


@dataclass
class LatencyModel:
    # one camera frame at the modulator/camera rate of 340 Hz
    seconds_per_projection: float = 1.0 / 340.0
    # two linear recoveries per ternary signal, two fresh frames each
    projections_per_signal: int = 4

    def __post_init__(self):
        if self.seconds_per_projection < 0:
            raise ValueError("seconds_per_projection must be non-negative")
        if self.projections_per_signal < 1:
            raise ValueError("projections_per_signal must be positive")

    def seconds(self, signals: int) -> float:
        return signals * self.projections_per_signal * self.seconds_per_projection


def intensity_measure(tm: TransmissionMatrix, x, noise: NoiseSpec | None = None, rng=None):
    """Camera intensities ``|T x|^2`` per output pixel.

    With measurement noise, Gaussian noise is added per pixel and the result
    clamped at zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != tm.cols:
        raise DimensionError(f"input length {x.shape[0]} does not match transmission matrix columns {tm.cols}")
    out = kernels.complex_intensity(tm.real, tm.imag, x)
    if noise is not None and noise.kind == "measurement_noise" and noise.sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        out = np.maximum(out + rng.normal(0.0, noise.sigma, size=out.shape), 0.0)
    return out


def _batch_intensity(tm: TransmissionMatrix, X):
    # X: (n, cols) -> (n, rows)
    re = X @ tm.real.T
    im = X @ tm.imag.T
    return re * re + im * im


class OpuSession:
    """Stateful simulated device: medium, anchor, noise, step and latency ledger.

    ``step_counter`` counts ternary feedback signals (``project_feedback``);
    ``tick`` counts training steps and keys the per-step noise draws.
    """

    def __init__(
        self,
        tm: TransmissionMatrix,
        anchor: AnchorVector | None = None,
        noise: NoiseSpec | None = None,
        latency: LatencyModel | None = None,
        threshold: float | None = None,
        anchor_seed: int = 0,
    ):
        self.tm0 = tm
        self.tm = tm.copy()
        self.noise = noise or NoiseSpec()
        self.latency = latency or LatencyModel()
        self.threshold = threshold
        self.step_counter = 0
        self.tick = 0
        self.drift_count = 0
        self._meas_rng = np.random.default_rng([self.noise.seed, 0x6D])
        if anchor is None:
            anchor = self._draw_anchor(anchor_seed)
        self.anchor = anchor
        self.anchor_intensity = kernels.complex_intensity(self.tm.real, self.tm.imag, anchor.r)

    def _draw_anchor(self, seed):
        for attempt in range(64):
            a = make_anchor(self.tm.cols, seed + attempt)
            inten = kernels.complex_intensity(self.tm.real, self.tm.imag, a.r)
            if inten.min() >= ANCHOR_FLOOR:
                return a
        raise DegenerateAnchorError("could not draw a non-degenerate anchor in 64 attempts")

    @property
    def rows(self):
        return self.tm.rows

    @property
    def cols(self):
        return self.tm.cols

    @property
    def optical_seconds(self) -> float:
        return self.step_counter * self.latency.projections_per_signal * self.latency.seconds_per_projection

    # -- noise views --------------------------------------------------------

    def noisy_tm_view(self) -> TransmissionMatrix:
        """T(0) plus a fresh perturbation keyed on the current training step."""
        if self.noise.kind != "tm_noise":
            raise NoiseKindError(f"noisy_tm_view requires tm_noise, session noise is {self.noise.kind!r}")
        if self.noise.sigma == 0.0:
            return self.tm0
        rng = np.random.default_rng([self.noise.seed, 0x746D, self.tick])
        s = self.noise.sigma
        return TransmissionMatrix(
            self.tm0.real + rng.normal(0.0, s, size=self.tm0.real.shape),
            self.tm0.imag + rng.normal(0.0, s, size=self.tm0.imag.shape),
            self.tm0.seed,
        )

    def drift_step(self):
        """Permanently add N(0, sigma^2) to both parts of the medium and refresh the anchor."""
        if self.noise.kind != "drift":
            raise NoiseKindError(f"drift_step requires drift noise, session noise is {self.noise.kind!r}")
        self.drift_count += 1
        if self.noise.sigma == 0.0:
            return
        rng = np.random.default_rng([self.noise.seed, 0x6472, self.drift_count])
        s = self.noise.sigma
        self.tm.real += rng.normal(0.0, s, size=self.tm.real.shape)
        self.tm.imag += rng.normal(0.0, s, size=self.tm.imag.shape)
        self.anchor_intensity = kernels.complex_intensity(self.tm.real, self.tm.imag, self.anchor.r)

    def end_step(self):
        """Advance the training-step clock; drift sessions drift once per step."""
        if self.noise.kind == "drift":
            self.drift_step()
        self.tick += 1

    def _medium(self):
        if self.noise.kind == "tm_noise" and self.noise.sigma > 0.0:
            return self.noisy_tm_view()
        return self.tm

    def _measure(self, tm, x):
        out = kernels.complex_intensity(tm.real, tm.imag, x)
        if self.noise.kind == "measurement_noise" and self.noise.sigma > 0.0:
            out = np.maximum(out + self._meas_rng.normal(0.0, self.noise.sigma, size=out.shape), 0.0)
        return out

    def _measure_batch(self, tm, X):
        out = _batch_intensity(tm, X)
        if self.noise.kind == "measurement_noise" and self.noise.sigma > 0.0:
            out = np.maximum(out + self._meas_rng.normal(0.0, self.noise.sigma, size=out.shape), 0.0)
        return out

    def _check_anchor(self):
        if self.anchor_intensity.min() < ANCHOR_FLOOR:
            raise DegenerateAnchorError(
                f"anchor intensity {self.anchor_intensity.min():.3e} below {ANCHOR_FLOOR:g}; re-seed the anchor"
            )

    # -- projections -------------------------------------------------------

    def linear_project(self, e, validation: bool = False):
        """Recover a real linear random projection of ``e`` from intensities."""
        e = np.asarray(e, dtype=np.float64).ravel()
        if e.shape[0] != self.cols:
            raise DimensionError(f"input length {e.shape[0]} does not match {self.cols} modulator pixels")
        if not validation and not np.all(np.isin(e, (-1.0, 0.0, 1.0))):
            raise ValueError("encoder accepts only values in {-1, 0, 1}; pass validation=True for real inputs")
        self._check_anchor()
        tm = self._medium()
        i_e = self._measure(tm, e)
        i_diff = self._measure(tm, self.anchor.r - e)
        return kernels.linear_recovery(self.anchor_intensity, i_e, i_diff)

    def linear_project_batch(self, X, validation: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.cols:
            raise DimensionError(f"input width {X.shape[1]} does not match {self.cols} modulator pixels")
        if not validation and not np.all(np.isin(X, (-1.0, 0.0, 1.0))):
            raise ValueError("encoder accepts only values in {-1, 0, 1}; pass validation=True for real inputs")
        self._check_anchor()
        tm = self._medium()
        i_e = self._measure_batch(tm, X)
        i_diff = self._measure_batch(tm, self.anchor.r[None, :] - X)
        i_r = self.anchor_intensity[None, :]
        return (i_r + i_e - i_diff) / (2.0 * np.sqrt(i_r))

    def project_feedback(self, e):
        """Ternarize ``e`` and project it optically: ``scale * T_eff (e+ - e-)``."""
        if self.threshold is None:
            raise ThresholdNotSetError("session threshold not set; call select_threshold first")
        code = ternarize(e, self.threshold)
        s = (self.linear_project(code.e_plus) - self.linear_project(code.e_minus)) * code.scale
        self.step_counter += 1
        return s

    def project_feedback_batch(self, E):
        """Row-wise ``project_feedback``; counts one signal per row."""
        if self.threshold is None:
            raise ThresholdNotSetError("session threshold not set; call select_threshold first")
        E = np.atleast_2d(np.asarray(E, dtype=np.float64))
        vals, scales = ternarize_rows(E, self.threshold)
        plus = (vals > 0).astype(np.float64)
        minus = (vals < 0).astype(np.float64)
        s = (self.linear_project_batch(plus) - self.linear_project_batch(minus)) * scales[:, None]
        self.step_counter += E.shape[0]
        return s

    def effective_matrix(self):
        """Real matrix of the recovered linear map, probed column by column."""
        cols = [self.linear_project(np.eye(self.cols)[j], validation=True) for j in range(self.cols)]
        return np.stack(cols, axis=1)

    def clone(self):
        return copy.deepcopy(self)

    def metadata(self):
        return {
            "rows": self.rows,
            "cols": self.cols,
            "tm_seed": self.tm0.seed,
            "anchor": [int(v) for v in self.anchor.r],
            "anchor_seed": self.anchor.seed,
            "noise": asdict(self.noise),
            "latency": asdict(self.latency),
            "threshold": self.threshold,
            "step_counter": self.step_counter,
            "tick": self.tick,
            "drift_count": self.drift_count,
        }


def intensity_of(session_or_tm, x):
    tm = session_or_tm.tm if isinstance(session_or_tm, OpuSession) else session_or_tm
    return intensity_measure(tm, x)


def linear_project(session: OpuSession, e, validation: bool = False):
    return session.linear_project(e, validation=validation)


def project_feedback(session: OpuSession, e):
    return session.project_feedback(e)


def noisy_tm_view(session: OpuSession):
    return session.noisy_tm_view()


def drift_step(session: OpuSession):
    session.drift_step()


THRESHOLD_GRID = np.linspace(0.0, 1.0, 101)


def _projector(proj):
    if isinstance(proj, OpuSession):
        return lambda X: proj.linear_project_batch(X, validation=True)
    B = np.asarray(proj, dtype=np.float64)
    return lambda X: X @ B.T


def threshold_scores(e0, projector, grid=THRESHOLD_GRID):
    """Mean cosine similarity between DFA and TDFA projections at each grid threshold."""
    E = np.atleast_2d(np.asarray(e0, dtype=np.float64))
    m = np.max(np.abs(E), axis=1)
    if np.any(m == 0.0):
        raise ValueError("threshold selection needs a nonzero error vector")
    ehat = E / m[:, None]
    project = _projector(projector)
    s_dfa = project(ehat)
    scores = np.empty(len(grid))
    for k, t in enumerate(grid):
        vals, _ = ternarize_rows(ehat, float(t))
        s_tdfa = project(vals)
        cs = []
        for a, b in zip(s_dfa, s_tdfa):
            try:
                cs.append(cosine_similarity(a, b))
            except UndefinedCorrelationError:
                cs.append(-np.inf)
        scores[k] = float(np.mean(cs))
    return scores


def select_threshold(e0, projector, grid=THRESHOLD_GRID) -> float:
    """Grid threshold maximizing DFA/TDFA cosine similarity; ties go to the smaller t.

    ``projector`` is an :class:`OpuSession` or a real feedback matrix. ``e0``
    may be a batch (rows), in which case the mean similarity is maximized.
    """
    scores = threshold_scores(e0, projector, grid)
    best = int(np.argmax(scores))  # first maximum, i.e. the smallest t
    t = float(grid[best])
    if isinstance(projector, OpuSession):
        projector.threshold = t
    return t


def stability_trace(session: OpuSession, probe, steps: int, stride: int = 1):
    """Drift the medium for ``steps`` steps, recording PCC(s(t), s(0)) every ``stride`` steps."""
    probe = np.asarray(probe, dtype=np.float64)
    if not probe.any():
        raise ValueError("stability probe must be nonzero")
    s0 = session.linear_project(probe, validation=True)
    trace = [(0, 1.0)]
    for step in range(1, steps + 1):
        session.drift_step()
        if step % stride == 0:
            trace.append((step, pearson_correlation(session.linear_project(probe, validation=True), s0)))
    return trace


def calibrate_drift_sigma(session: OpuSession, probe, steps: int, target_pcc: float = 0.54, iters: int = 40):
    """Drift sigma whose ``steps``-step trace ends at ``target_pcc``.

    Uses the session's own noise seed, so a session configured with the
    returned sigma replays exactly the calibrated drift trajectory.
    """
    probe = np.asarray(probe, dtype=np.float64)

    def final_pcc(sigma):
        s = session.clone()
        s.noise = NoiseSpec("drift", sigma, session.noise.seed)
        return stability_trace(s, probe, steps, stride=steps)[-1][1]

    lo, hi = 0.0, 0.05
    while final_pcc(hi) > target_pcc:
        hi *= 2.0
        if hi > 1e3:
            raise RuntimeError("drift calibration failed to bracket the target")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if final_pcc(mid) > target_pcc:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class SessionConfig:
    rows: int
    cols: int
    tm_seed: int = 0
    anchor_seed: int = 1
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    latency: LatencyModel = field(default_factory=LatencyModel)

    def build(self) -> OpuSession:
        tm = sample_transmission_matrix(self.rows, self.cols, self.tm_seed)
        return OpuSession(tm, noise=self.noise, latency=self.latency, anchor_seed=self.anchor_seed)
