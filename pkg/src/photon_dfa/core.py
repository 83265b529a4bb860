"""Dense float64 building blocks shared by every trainer.

Forward/backward passes in this package are written by hand; nothing here
builds a graph. All functions take and return numpy arrays of dtype float64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are not conformant."""


class UndefinedCorrelationError(ValueError):
    """A correlation or similarity is undefined for the given inputs."""


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


def _as_activation(g) -> Activation:
    return g if isinstance(g, Activation) else Activation(g)


def affine_forward(W, a, b):
    """Return ``W @ a + b`` for a single vector, accumulated left to right.

    The accumulation order is fixed (row-major, column index ascending, bias
    added last) so the result is reproducible bit for bit across backends.
    """
    W = np.asarray(W, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or a.ndim != 1 or b.ndim != 1 or W.shape[1] != a.shape[0] or W.shape[0] != b.shape[0]:
        raise DimensionError(f"affine_forward: W{W.shape} @ a{a.shape} + b{b.shape} is not conformant")
    return kernels.matvec(W, a, b)


def activate(g, h):
    g = _as_activation(g)
    h = np.asarray(h, dtype=np.float64)
    if g is Activation.IDENTITY:
        return h.copy()
    if g is Activation.RELU:
        return np.maximum(h, 0.0)
    if g is Activation.TANH:
        return np.tanh(h)
    # split by sign so exp never overflows
    out = np.empty_like(h)
    pos = h >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-h[pos]))
    ex = np.exp(h[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_derivative(g, h):
    """Elementwise g'(h). relu'(0) is 0."""
    g = _as_activation(g)
    h = np.asarray(h, dtype=np.float64)
    if g is Activation.IDENTITY:
        return np.ones_like(h)
    if g is Activation.RELU:
        return (h > 0).astype(np.float64)
    if g is Activation.TANH:
        t = np.tanh(h)
        return 1.0 - t * t
    s = activate(Activation.SIGMOID, h)
    return s * (1.0 - s)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, target_index):
    """Cross-entropy of one logit vector against a class index.

    Returns ``(loss, e)`` with ``e = softmax(logits) - onehot(target)``, the
    gradient of the loss with respect to the logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy expects a vector, got shape {logits.shape}")
    if not 0 <= target_index < logits.shape[0]:
        raise IndexError(f"target index {target_index} out of range for {logits.shape[0]} classes")
    lp = log_softmax(logits)
    e = np.exp(lp)
    e[target_index] -= 1.0
    return float(-lp[target_index]), e


def batch_softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over rows and the per-row error matrix (not averaged)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    e = np.exp(lp)
    e[rows, targets] -= 1.0
    return float(-lp[rows, targets].mean()), e


def pearson_correlation(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise DimensionError(f"pearson_correlation needs equal lengths >= 2, got {x.shape} and {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError("cosine similarity undefined for a zero vector")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def init_uniform(rng: np.random.Generator, d_out: int, d_in: int):
    """Fan-in uniform init in [-1/sqrt(d_in), 1/sqrt(d_in)] for weight and bias."""
    bound = 1.0 / math.sqrt(d_in)
    W = rng.uniform(-bound, bound, size=(d_out, d_in))
    b = rng.uniform(-bound, bound, size=d_out)
    return W, b


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam state over a dict of named parameters.

    ``apply_update`` mutates the parameter arrays in place. A learning-rate
    multiplier (for schedules) may be passed per call.
    """

    kind: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def apply_update(self, params: dict, grads: dict, lr_scale: float = 1.0):
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        self.step_count += 1
        lr = self.learning_rate * lr_scale
        if self.kind == "sgd_momentum":
            for name, g in grads.items():
                if self.momentum == 0.0:
                    params[name] -= lr * g
                    continue
                v = self.buffers.get(name)
                if v is None:
                    v = self.buffers[name] = np.zeros_like(g)
                v *= self.momentum
                v += g
                params[name] -= lr * v
            return params
        b1, b2 = self.adam_beta1, self.adam_beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, g in grads.items():
            m, v = self.buffers.get(name, (None, None))
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
                self.buffers[name] = (m, v)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.adam_eps)
        return params


def apply_update(params: dict, grads: dict, opt: OptimizerState, lr_scale: float = 1.0):
    return opt.apply_update(params, grads, lr_scale)
