import numpy as np
import pytest

from photon_dfa.data import synthetic_digits


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_digits():
    return synthetic_digits(n_train=600, n_test=200, seed=3)


def central_difference(f, x, h=1e-6):
    """Gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-300):
    """Max abs difference over the larger max magnitude (never below ``floor``)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# criterion -> list of (part, ok, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(criterion, part, ok, detail):
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0] + ': ' if p[0] else ''}{'ok' if p[1] else 'FAILED'} ({p[2]})" for p in parts)
        tr.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {detail}")
