"""Per-sample training-time scaling of BP versus simulated optical DFA.

Timing runs one sample at a time through forward, feedback and update
stages. For ODFA the optical projection is charged from the latency ledger
(signals x projections_per_signal x seconds_per_projection); the simulator's
own digital cost for emulating the optics is kept out of the timings.

``clock="wall"`` measures with ``perf_counter``; ``clock="model"`` charges
a fixed cost per floating-point operation instead, which makes scans
reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg.blas import dger

from .core import Activation
from .mlp import MlpModel
from .opu import LatencyModel, OpuSession, sample_transmission_matrix, ternarize

ALGORITHMS = ("bp", "odfa")
CLOCKS = ("wall", "model")
MODEL_FLOPS_PER_SECOND = 1e9
STAR_WIDTH, STAR_DEPTH = 3080, 96
STAR_BP_MS, STAR_ODFA_MS = 13.39, 13.09


class CapacityError(MemoryError):
    pass


class ResumeError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass
class ScalingPoint:
    width: int
    depth: int
    algorithm: str
    seconds_per_sample: float
    forward: float
    feedback: float
    update: float
    optical: float

    @property
    def breakdown(self):
        return (self.forward, self.feedback, self.update, self.optical)

    @property
    def digital_seconds(self):
        return self.forward + self.feedback + self.update


@dataclass
class FitResult:
    model: str
    coefficients: list
    r_squared: float

    def predict(self, width=None, depth=None):
        c = self.coefficients
        if self.model == "quadratic_in_width":
            return c[0] * width ** 2 + c[1] * width + c[2]
        if self.model == "linear_in_depth":
            return c[0] * depth + c[1]
        return float(np.dot(c, _surface_features(width, depth)))


def _available_bytes():
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _check_capacity(dims, algorithm):
    n_params = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    need = n_params * 8 * 2
    if algorithm == "odfa":
        need += sum(dims[1:-1]) * dims[-1] * 16 * 2
    avail = _available_bytes()
    if avail is not None and need > avail:
        raise CapacityError(f"benchmark model needs about {need / 2**20:.1f} MiB, only {avail / 2**20:.1f} MiB free")
    return need


def _stage_flops(dims, algorithm):
    fwd = sum(2 * a * b + 2 * b for a, b in zip(dims[:-1], dims[1:])) + 4 * dims[-1]
    if algorithm == "bp":
        fb = sum(2 * dims[l] * dims[l + 1] + 2 * dims[l] for l in range(1, len(dims) - 1))
    else:
        fb = 3 * dims[-1] + 2 * sum(dims[1:-1])
    upd = sum(3 * a * b + 2 * b for a, b in zip(dims[:-1], dims[1:]))
    return fwd, fb, upd


def time_training(width: int, depth: int, algorithm: str, latency: LatencyModel | None = None,
                  samples: int = 100, d_in: int = 784, d_out: int = 10, seed: int = 0,
                  clock: str = "wall", reps: int = 3, lr: float = 0.01) -> ScalingPoint:
    """Median-of-``reps`` per-sample step time of an FCNN with ``depth`` hidden layers of ``width``."""
    if min(width, depth, samples) < 1:
        raise ValueError("width, depth and samples must be >= 1")
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    if clock not in CLOCKS:
        raise ValueError(f"unknown clock {clock!r}; expected one of {CLOCKS}")
    latency = latency or LatencyModel()
    dims = [d_in] + [width] * depth + [d_out]
    _check_capacity(dims, algorithm)
    optical = latency.seconds(1) if algorithm == "odfa" else 0.0

    if clock == "model":
        fwd, fb, upd = (f / MODEL_FLOPS_PER_SECOND for f in _stage_flops(dims, algorithm))
        return ScalingPoint(width, depth, algorithm, fwd + fb + upd + optical, fwd, fb, upd, optical)

    try:
        model = MlpModel.init(dims, seed=seed, hidden_activation=Activation.TANH)
        session = None
        if algorithm == "odfa":
            tm = sample_transmission_matrix(width * depth, d_out, seed=seed + 1)
            session = OpuSession(tm, latency=latency, threshold=0.25, anchor_seed=seed + 2)
    except MemoryError as exc:
        raise CapacityError(f"allocation for dims {dims} failed: {exc}") from exc
    rng = np.random.default_rng([seed, 0xBE])
    X = rng.normal(size=(samples, d_in))
    Y = rng.integers(0, d_out, size=samples)

    def one_pass():
        acc = np.zeros(3)
        for i in range(samples):
            t0 = time.perf_counter()
            a = [X[i]]
            for l, (W, b) in enumerate(zip(model.weights, model.biases), start=1):
                z = W @ a[-1] + b
                a.append(z if l == len(model.weights) else np.tanh(z))
            p = np.exp(a[-1] - a[-1].max())
            e = p / p.sum()
            e[Y[i]] -= 1.0
            t1 = time.perf_counter()
            t_sim = 0.0
            if algorithm == "bp":
                deltas = [e]
                for l in range(len(model.weights) - 1, 0, -1):
                    deltas.append((model.weights[l].T @ deltas[-1]) * (1.0 - a[l] ** 2))
                deltas.reverse()
            else:
                code = ternarize(e, session.threshold)
                ts = time.perf_counter()
                s = session.linear_project(code.e_plus) - session.linear_project(code.e_minus)
                session.step_counter += 1
                t_sim = time.perf_counter() - ts  # emulated optics, charged via the ledger instead
                deltas = []
                o = 0
                for l in range(1, len(model.weights)):
                    deltas.append(code.scale * s[o:o + width] * (1.0 - a[l] ** 2))
                    o += width
                deltas.append(e)
            t2 = time.perf_counter()
            for l, (W, b) in enumerate(zip(model.weights, model.biases)):
                dger(-lr, a[l], deltas[l], a=W.T, overwrite_a=1)  # in-place rank-1 W -= lr * outer(delta, a)
                b -= lr * deltas[l]
            t3 = time.perf_counter()
            acc += (t1 - t0, t2 - t1 - t_sim, t3 - t2)
        return acc / samples

    one_pass()  # warm-up
    runs = sorted((one_pass() for _ in range(reps)), key=lambda r: r.sum())
    fwd, fb, upd = (float(v) for v in runs[len(runs) // 2])
    return ScalingPoint(width, depth, algorithm, fwd + fb + upd + optical, fwd, fb, upd, optical)


CSV_FIELDS = ["algorithm", "depth", "width", "seconds_per_sample", "forward", "feedback", "update", "optical"]


def _row(p: ScalingPoint, tag=None):
    row = [p.algorithm, p.depth, p.width] + [repr(float(v)) for v in
                                              (p.seconds_per_sample, p.forward, p.feedback, p.update, p.optical)]
    return row if tag is None else row + [tag]


def read_points(path):
    pts = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            pts.append(ScalingPoint(int(r["width"]), int(r["depth"]), r["algorithm"],
                                    *(float(r[k]) for k in CSV_FIELDS[3:])))
    return pts


def scan_widths(depths, widths, algorithms=ALGORITHMS, latency: LatencyModel | None = None, samples=100,
                out_csv=None, clock="wall", seed=0, progress=None, timer=time_training, config_hash=None):
    """Cross product in (algorithm, depth, width) order; resumes from ``out_csv`` if it exists.

    With ``config_hash`` every row carries it, and a resume file written
    under a different hash is refused.
    """
    if not depths or not widths or not algorithms:
        raise ValueError("scan grids must be non-empty")
    done = {}
    fresh = out_csv is None or not Path(out_csv).exists() or Path(out_csv).stat().st_size == 0
    if not fresh:
        try:
            with open(out_csv, newline="") as fh:
                header = next(csv.reader(fh), None)
            want = CSV_FIELDS + (["config_hash"] if config_hash else [])
            if header != want:
                raise ValueError(f"header {header} != {want}")
            if config_hash:
                with open(out_csv, newline="") as fh:
                    tags = {r["config_hash"] for r in csv.DictReader(fh)}
                if tags - {config_hash}:
                    raise ValueError(f"rows from another config {sorted(tags - {config_hash})}")
            for p in read_points(out_csv):
                done[(p.algorithm, p.depth, p.width)] = p
        except (KeyError, ValueError, TypeError) as exc:
            raise ResumeError(f"{out_csv}: corrupt resume file ({exc})") from exc
    fh = writer = None
    if out_csv is not None:
        fh = open(out_csv, "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(CSV_FIELDS + (["config_hash"] if config_hash else []))
    out = []
    try:
        for alg in algorithms:
            for d in depths:
                for w in widths:
                    key = (alg, int(d), int(w))
                    if key in done:
                        out.append(done[key])
                        continue
                    p = timer(int(w), int(d), alg, latency, samples, seed=seed, clock=clock)
                    out.append(p)
                    if writer is not None:
                        writer.writerow(_row(p, config_hash))
                        fh.flush()
                    if progress:
                        progress(p)
    finally:
        if fh is not None:
            fh.close()
    return out


def _r_squared(y, yhat):
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def _surface_features(w, d):
    w = np.asarray(w, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    return np.stack([d * w * w, d * w, d, w, np.ones_like(w)], axis=-1)


def fit_scaling(points, model="quadratic_in_width", value=lambda p: p.seconds_per_sample) -> FitResult:
    """Least squares: quadratic_in_width, linear_in_depth or depth_width_surface
    (t = a*d*w^2 + b*d*w + c*d + e*w + f, used for extrapolation)."""
    pts = list(points)
    if len(pts) < 4:
        raise ValueError("fit_scaling needs at least 4 points")
    y = np.array([value(p) for p in pts])
    w = np.array([p.width for p in pts], dtype=np.float64)
    d = np.array([p.depth for p in pts], dtype=np.float64)
    if model == "quadratic_in_width":
        A = np.stack([w * w, w, np.ones_like(w)], axis=1)
    elif model == "linear_in_depth":
        A = np.stack([d, np.ones_like(d)], axis=1)
    elif model == "depth_width_surface":
        A = _surface_features(w, d)
    else:
        raise ValueError(f"unknown fit model {model!r}")
    if np.linalg.matrix_rank(A) < A.shape[1]:
        raise ValueError(f"degenerate design matrix for {model}: need more distinct grid values")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return FitResult(model, [float(c) for c in coef], _r_squared(y, A @ coef))


def find_crossover(points_bp, points_odfa):
    """Smallest (width, depth) grid point where ODFA is strictly faster than BP, else None."""
    bp = {(p.width, p.depth): p.seconds_per_sample for p in points_bp}
    od = {(p.width, p.depth): p.seconds_per_sample for p in points_odfa}
    if set(bp) != set(od):
        raise GridMismatchError("BP and ODFA points cover different grids")
    for key in sorted(bp):
        if od[key] < bp[key]:
            return {"width": key[0], "depth": key[1], "bp_seconds": bp[key], "odfa_seconds": od[key]}
    return None


def with_latency(points, latency: LatencyModel):
    """Re-cost ODFA points under another latency model (the optical part is pure arithmetic)."""
    out = []
    for p in points:
        opt = latency.seconds(1) if p.algorithm == "odfa" else 0.0
        out.append(ScalingPoint(p.width, p.depth, p.algorithm, p.digital_seconds + opt,
                                p.forward, p.feedback, p.update, opt))
    return out


def calibrate_latency(points, width=STAR_WIDTH, depth=STAR_DEPTH, ratio=STAR_ODFA_MS / STAR_BP_MS,
                      projections_per_signal=4):
    """Seconds per projection that make extrapolated ODFA/BP equal ``ratio`` at (width, depth)."""
    bp = [p for p in points if p.algorithm == "bp"]
    od = [p for p in points if p.algorithm == "odfa"]
    fit_bp = fit_scaling(bp, "depth_width_surface")
    fit_od = fit_scaling(od, "depth_width_surface", value=lambda p: p.digital_seconds)
    t_bp = fit_bp.predict(width, depth)
    t_od = fit_od.predict(width, depth)
    spp = (ratio * t_bp - t_od) / projections_per_signal
    if not spp > 0:
        raise ValueError(f"no positive latency reproduces ratio {ratio:.4f}: "
                         f"extrapolated BP {t_bp:.3e}s, ODFA digital {t_od:.3e}s")
    return LatencyModel(spp, projections_per_signal), {"bp_fit": asdict(fit_bp), "odfa_digital_fit": asdict(fit_od),
                                                       "bp_extrapolated": t_bp, "odfa_digital_extrapolated": t_od}


def predicted_points(fit_bp: FitResult, fit_odfa_digital: FitResult, latency: LatencyModel, widths, depths):
    bp, od = [], []
    for d in depths:
        for w in widths:
            tb = fit_bp.predict(w, d)
            td = fit_odfa_digital.predict(w, d)
            bp.append(ScalingPoint(w, d, "bp", tb, 0.0, 0.0, tb, 0.0))
            opt = latency.seconds(1)
            od.append(ScalingPoint(w, d, "odfa", td + opt, 0.0, 0.0, td, opt))
    return bp, od


def coefficient_of_variation(values):
    v = np.asarray(values, dtype=np.float64)
    m = v.mean()
    return 0.0 if m == 0 else float(v.std() / abs(m))


def summarize(points, latency: LatencyModel, star_depth=STAR_DEPTH, star_width=STAR_WIDTH):
    """Fits, latency calibration and crossovers as a JSON-ready dict."""
    out = {"latency": asdict(latency)}
    bp = [p for p in points if p.algorithm == "bp"]
    od = [p for p in points if p.algorithm == "odfa"]
    for alg, pts in (("bp", bp), ("odfa", od)):
        for d in sorted({p.depth for p in pts}):
            row = [p for p in pts if p.depth == d]
            if len(row) >= 4:
                out[f"{alg}_width_fit_depth{d}"] = asdict(fit_scaling(row, "quadratic_in_width"))
            if alg == "odfa" and len(row) > 1:
                out[f"odfa_optical_cv_depth{d}"] = coefficient_of_variation([p.optical for p in row])
    if bp and od:
        out["crossover_measured"] = find_crossover(bp, od)
        try:
            cal, info = calibrate_latency(points, star_width, star_depth)
        except ValueError as exc:
            out["calibration_error"] = str(exc)
            return out
        out["calibrated_latency"] = asdict(cal)
        out["calibration"] = info
        recosted = with_latency(points, cal)
        out["crossover_measured_calibrated"] = find_crossover([p for p in recosted if p.algorithm == "bp"],
                                                              [p for p in recosted if p.algorithm == "odfa"])
        fb = FitResult(**info["bp_fit"])
        fo = FitResult(**info["odfa_digital_fit"])
        widths = list(range(100, star_width + 1, 20))
        if widths[-1] != star_width:
            widths.append(star_width)
        pb, po = predicted_points(fb, fo, cal, widths, [star_depth])
        out["crossover_extrapolated"] = find_crossover(pb, po)
        out["star_point"] = {"width": star_width, "depth": star_depth,
                             "bp_seconds": fb.predict(star_width, star_depth),
                             "odfa_seconds": fo.predict(star_width, star_depth) + cal.seconds(1)}
    return out


def write_summary(path, summary):
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
