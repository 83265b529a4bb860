"""Mini-batch training of MLPs with BP, DFA, TDFA, simulated optical DFA or SHLW."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import OptimizerState, batch_softmax_cross_entropy
from .data import Dataset
from .mlp import (
    FeedbackMatrixSet,
    MlpModel,
    alignment_probe,
    backward_bp,
    backward_dfa,
    backward_odfa,
    backward_shlw,
    backward_tdfa,
    forward_mlp,
)
from .opu import LatencyModel, NoiseSpec, OpuSession, sample_transmission_matrix, select_threshold

ALGORITHMS = ("bp", "dfa", "tdfa", "odfa", "shlw")
GRANULARITIES = ("per_batch", "per_sample")


class ConfigError(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    algorithm: str = "dfa"
    batch_size: int = 100
    epochs: int = 50
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd_momentum", "learning_rate": 0.01, "momentum": 0.9})
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    projection_granularity: str = "per_batch"
    threshold: float | None = None  # None: select from the first batch
    val_fraction: float = 0.1
    feedback_scale: float = 1.0
    alignment_samples: int = 200

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.projection_granularity not in GRANULARITIES:
            raise ConfigError(f"unknown projection granularity {self.projection_granularity!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.noise.active and self.algorithm in ("bp", "shlw"):
            raise ConfigError(f"noise {self.noise.kind!r} only applies to feedback algorithms, not {self.algorithm!r}")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        try:
            OptimizerState(**self.optimizer)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer spec: {exc}") from exc

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainingTrace:
    config_hash: str
    n_hidden: int
    steps: list = field(default_factory=list)  # (step, train loss)
    epochs: list = field(default_factory=list)  # dicts, see _evaluate

    def final(self):
        return self.epochs[-1]

    def column_names(self):
        return (["step", "split", "loss", "accuracy"]
                + [f"align_{l}" for l in range(1, self.n_hidden + 1)]
                + ["optical_seconds", "wall_seconds", "config_hash"])

    def rows(self, include_wall=True):
        blank_align = [""] * self.n_hidden
        merged = []
        for step, loss in self.steps:
            merged.append((step, 1, [step, "train", _fmt(loss), ""] + blank_align + ["", ""]))
        for rec in self.epochs:
            align = ["" if a is None else _fmt(a) for a in rec["alignment"]]
            wall = _fmt(rec["wall_seconds"]) if include_wall else ""
            for split in (sp for sp in ("val", "test") if f"{sp}_loss" in rec):
                merged.append((rec["step"], 0 if split == "val" else 0.5,
                               [rec["step"], split, _fmt(rec[f"{split}_loss"]), _fmt(rec[f"{split}_accuracy"])]
                               + align + [_fmt(rec["optical_seconds"]), wall]))
        merged.sort(key=lambda r: (r[0], r[1]))
        return [r[2] + [self.config_hash] for r in merged]

    def to_csv(self, path, include_wall=True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.column_names())
            w.writerows(self.rows(include_wall))

    def write_timing(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "wall_seconds"])
            for rec in self.epochs:
                w.writerow([rec["epoch"], rec["step"], _fmt(rec["wall_seconds"])])


def _fmt(x):
    return repr(float(x))


def build_session(model: MlpModel, config: TrainConfig, latency: LatencyModel | None = None) -> OpuSession:
    rows = sum(model.hidden_dims)
    tm = sample_transmission_matrix(rows, model.layer_dims[-1], seed=config.seed + 7919)
    return OpuSession(tm, noise=config.noise, latency=latency, anchor_seed=config.seed + 104729)


def split_validation(dataset: Dataset, fraction: float, seed: int):
    rng = np.random.default_rng([seed, 0x5A1])
    n = len(dataset.y_train)
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    return perm[n_val:], perm[:n_val]


class _DigitalNoise:
    """Per-step noise applied to digital feedback matrices or signals."""

    def __init__(self, spec: NoiseSpec, feedback: FeedbackMatrixSet):
        self.spec = spec
        self.base = feedback
        self.live = feedback.copy()
        self.step = 0

    def matrices_for_step(self):
        k, s = self.spec.kind, self.spec.sigma
        if k == "tm_noise" and s > 0:
            rng = np.random.default_rng([self.spec.seed, 0x746D, self.step])
            return FeedbackMatrixSet([B + rng.normal(0.0, s, size=B.shape) for B in self.base.matrices],
                                     self.base.provenance)
        if k == "drift":
            return self.live
        return self.base

    def signal_noise(self, shape):
        rng = np.random.default_rng([self.spec.seed, 0x6D73, self.step])
        return rng.normal(0.0, self.spec.sigma, size=shape)

    def end_step(self):
        if self.spec.kind == "drift" and self.spec.sigma > 0:
            rng = np.random.default_rng([self.spec.seed, 0x6472, self.step + 1])
            for B in self.live.matrices:
                B += rng.normal(0.0, self.spec.sigma, size=B.shape)
        self.step += 1


def _evaluate(model, X, y):
    cache = forward_mlp(model, X)
    loss, _ = batch_softmax_cross_entropy(cache.logits, y)
    acc = float(np.mean(np.argmax(cache.logits, axis=1) == y))
    return loss, acc


def train(model: MlpModel, dataset: Dataset, config: TrainConfig, feedback: FeedbackMatrixSet | None = None,
          session: OpuSession | None = None, latency: LatencyModel | None = None,
          progress=None) -> TrainingTrace:
    """Train ``model`` in place and return its trace.

    ``feedback`` defaults to a seeded N(0, feedback_scale^2) set; for
    ``odfa`` a session is built from the config if none is given. The
    threshold for ``tdfa``/``odfa`` is picked once from the first batch.
    """
    config.validate()
    alg = config.algorithm
    if dataset.x_train.shape[1] != model.layer_dims[0]:
        raise ConfigError(f"dataset has {dataset.x_train.shape[1]} features, model expects {model.layer_dims[0]}")
    if len(dataset.y_train) == 0:
        raise ConfigError("empty training set")
    if alg == "odfa":
        if session is None:
            session = build_session(model, config, latency)
        if session.rows < sum(model.hidden_dims) or session.cols != model.layer_dims[-1]:
            raise ConfigError(f"session {session.rows}x{session.cols} cannot serve hidden dims "
                              f"{model.hidden_dims} with output dim {model.layer_dims[-1]}")
        if config.threshold is not None:
            session.threshold = config.threshold
    if feedback is None and alg in ("dfa", "tdfa"):
        feedback = FeedbackMatrixSet.digital_gaussian(model.hidden_dims, model.layer_dims[-1],
                                                      seed=config.seed + 31, scale=config.feedback_scale)
    probe_feedback = feedback
    if alg == "odfa":
        probe_feedback = FeedbackMatrixSet.from_session(session, model.hidden_dims)
    elif probe_feedback is None:
        probe_feedback = FeedbackMatrixSet.digital_gaussian(model.hidden_dims, model.layer_dims[-1],
                                                            seed=config.seed + 31, scale=config.feedback_scale)

    opt = OptimizerState(**config.optimizer)
    noise = _DigitalNoise(config.noise, feedback) if feedback is not None else None
    threshold = config.threshold
    train_idx, val_idx = split_validation(dataset, config.val_fraction, config.seed)
    X, Y = dataset.x_train, dataset.y_train
    probe_idx = val_idx[:config.alignment_samples] if len(val_idx) else train_idx[:config.alignment_samples]
    trace = TrainingTrace(config.hash(), len(model.hidden_dims))
    rng = np.random.default_rng([config.seed, 0xDA7A])
    t_start = time.perf_counter()
    gran = config.projection_granularity

    def record(epoch, step):
        if len(val_idx):
            vl, va = _evaluate(model, X[val_idx], Y[val_idx])
        else:
            vl, va = float("nan"), float("nan")
        tl, ta = _evaluate(model, dataset.x_test, dataset.y_test)
        pc = forward_mlp(model, X[probe_idx])
        _, pe = batch_softmax_cross_entropy(pc.logits, Y[probe_idx])
        align = alignment_probe(model, pc, pe, probe_feedback) if model.hidden_dims else []
        trace.epochs.append({
            "epoch": epoch, "step": step, "val_loss": vl, "val_accuracy": va,
            "test_loss": tl, "test_accuracy": ta, "alignment": align,
            "optical_seconds": session.optical_seconds if session is not None else 0.0,
            "wall_seconds": time.perf_counter() - t_start,
        })
        if progress:
            progress(trace.epochs[-1])

    record(0, 0)
    step = 0
    params = model.params()
    for epoch in range(1, config.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            cache = forward_mlp(model, X[idx])
            loss, e = batch_softmax_cross_entropy(cache.logits, Y[idx])
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite training loss at step {step}")
            if alg in ("tdfa", "odfa") and threshold is None:
                e0 = e.mean(axis=0) if gran == "per_batch" else e
                threshold = select_threshold(e0, session if alg == "odfa" else feedback.stacked())
            if alg == "bp":
                g = backward_bp(model, cache, e)
            elif alg == "shlw":
                g = backward_shlw(model, cache, e)
            elif alg == "odfa":
                g = backward_odfa(model, cache, e, session, gran)
            else:
                fb = noise.matrices_for_step()
                if config.noise.kind == "measurement_noise" and config.noise.sigma > 0:
                    g = _noisy_signal_backward(model, cache, e, fb, alg, threshold, gran, noise)
                elif alg == "dfa":
                    g = backward_dfa(model, cache, e, fb, gran)
                else:
                    g = backward_tdfa(model, cache, e, fb, threshold, gran)
            opt.apply_update(params, g.grads)
            step += 1
            trace.steps.append((step, loss))
            if session is not None:
                session.end_step()
            if noise is not None:
                noise.end_step()
        record(epoch, step)
    trace.threshold = threshold
    return trace


def _noisy_signal_backward(model, cache, e, fb, alg, threshold, gran, noise):
    from .mlp import Gradients, _param_grads, _reduce_error, deltas_from_signals, ternary_error

    src = _reduce_error(e, gran)
    if alg == "tdfa":
        src = ternary_error(src, threshold)
    signals = [src @ B.T for B in fb.matrices]
    signals = [s + noise.signal_noise(s.shape) for s in signals]
    deltas = deltas_from_signals(model, cache, e, signals)
    return Gradients(deltas, _param_grads(model, cache, deltas))
