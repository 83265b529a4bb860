"""Latitude-weighted NRMSE metrics for gridded (time x lat x lon) fields.

The global mean weights latitude row ``i`` (1-based) by ``sin(pi * i / H)``,
so the last row has weight zero. Denominators use the prediction's global
mean, in absolute value so the metrics stay non-negative.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels


class ZeroDenominatorError(ZeroDivisionError):
    pass


@dataclass
class GridField:
    values: np.ndarray  # (T, H, W)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"grid field must be (T, H, W) with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid field contains non-finite values")
        self.values = v

    @property
    def shape(self):
        return self.values.shape

    def save(self, path):
        """Little-endian float64 payload plus ``<path>.json`` holding the shape."""
        path = Path(path)
        path.write_bytes(self.values.astype("<f8").tobytes())
        Path(str(path) + ".json").write_text(json.dumps({"shape": list(self.shape)}))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".csv":
            return cls.load_csv(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        T, H, W = meta["shape"]
        raw = np.frombuffer(path.read_bytes(), dtype="<f8")
        if raw.size != T * H * W:
            raise ValueError(f"{path}: {raw.size} values, sidecar promises {T}x{H}x{W}")
        return cls(raw.reshape(T, H, W).astype(np.float64))

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "i", "j", "value"])
            for (t, i, j), v in np.ndenumerate(self.values):
                w.writerow([t, i, j, repr(float(v))])

    @classmethod
    def load_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh)]
        idx = np.array([[int(r["t"]), int(r["i"]), int(r["j"])] for r in rows])
        vals = np.array([float(r["value"]) for r in rows])
        out = np.full(tuple(idx.max(axis=0) + 1), np.nan)
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
        return cls(out)


def _arr(f):
    return f.values if isinstance(f, GridField) else GridField(f).values


def latitude_weights(H: int) -> np.ndarray:
    return np.sin(np.pi * np.arange(1, H + 1) / H)


def global_mean(y) -> float:
    """Sin-weighted mean of one (H, W) slice."""
    return float(kernels.sin_weighted_mean(np.atleast_2d(y)))


def global_means(field) -> np.ndarray:
    v = _arr(field)
    return np.array([global_mean(v[t]) for t in range(v.shape[0])])


def _denominator(pred):
    d = float(np.mean(global_means(pred)))
    if d == 0.0:
        raise ZeroDenominatorError("time-mean global mean of the prediction is zero")
    return abs(d)


def _check(pred, target):
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def spatial_nrmse(pred, target) -> float:
    p, t = _check(pred, target)
    diff = p.mean(axis=0) - t.mean(axis=0)
    return float(np.sqrt(global_mean(diff * diff)) / _denominator(p))


def global_nrmse(pred, target) -> float:
    p, t = _check(pred, target)
    d = global_means(p) - global_means(t)
    return float(np.sqrt(np.mean(d * d)) / _denominator(p))


def total_nrmse(pred, target, alpha: float = 5.0) -> float:
    return spatial_nrmse(pred, target) + alpha * global_nrmse(pred, target)


def rmse(pred, target) -> float:
    """Plain unweighted RMSE over all grid points and time steps."""
    p, t = _check(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def all_metrics(pred, target, alpha: float = 5.0) -> dict:
    s = spatial_nrmse(pred, target)
    g = global_nrmse(pred, target)
    return {"spatial_nrmse": s, "global_nrmse": g, "total_nrmse": s + alpha * g,
            "rmse": rmse(pred, target), "alpha": alpha}
