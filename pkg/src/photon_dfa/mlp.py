"""Fully connected networks with hand-written BP, DFA, TDFA and optical-DFA backward passes.

Batched inputs are row-major: ``X`` has shape (batch, d0) and every cached
activation has shape (batch, d_l). A 1-D input is treated as a batch of one
and forwarded with the fixed-order ``affine_forward`` kernel.

Parameter gradients are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Activation,
    DimensionError,
    UndefinedCorrelationError,
    activate,
    activation_derivative,
    affine_forward,
    cosine_similarity,
    init_uniform,
)
from .opu import OpuSession, ternarize_rows


@dataclass
class MlpModel:
    layer_dims: list
    weights: list
    biases: list
    hidden_activation: Activation = Activation.TANH

    @classmethod
    def init(cls, layer_dims, seed=0, hidden_activation=Activation.TANH):
        rng = np.random.default_rng(seed)
        Ws, bs = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            W, b = init_uniform(rng, d_out, d_in)
            Ws.append(W)
            bs.append(b)
        return cls(list(layer_dims), Ws, bs, Activation(hidden_activation))

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def hidden_dims(self):
        return list(self.layer_dims[1:-1])

    def n_parameters(self):
        return sum(d_out * d_in + d_out for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    def params(self):
        """Name -> array views (mutated in place by optimizers)."""
        out = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"W{l}"] = W
            out[f"b{l}"] = b
        return out

    def copy(self):
        return MlpModel(list(self.layer_dims), [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.hidden_activation)

    def predict(self, X):
        return forward_mlp(self, X).logits


@dataclass
class ForwardCache:
    activations: list  # a0 .. aL (aL are the logits)
    preactivations: list  # h1 .. hL

    @property
    def logits(self):
        return self.activations[-1]


def forward_mlp(model: MlpModel, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != model.layer_dims[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match layer_dims[0]={model.layer_dims[0]}")
    acts = [x]
    pre = []
    a = x
    for l, (W, b) in enumerate(zip(model.weights, model.biases), start=1):
        h = affine_forward(W, a, b) if single else a @ W.T + b
        pre.append(h)
        a = h if l == model.n_layers else activate(model.hidden_activation, h)
        acts.append(a)
    return ForwardCache(acts, pre)


@dataclass
class Gradients:
    deltas: list  # delta h^(1) .. delta h^(L), shaped like the preactivations
    grads: dict = field(default_factory=dict)


def _param_grads(model, cache, deltas, trainable=None):
    grads = {}
    for l in range(1, model.n_layers + 1):
        if trainable is not None and l not in trainable:
            continue
        d = deltas[l - 1]
        a = cache.activations[l - 1]
        if d.ndim == 1:
            grads[f"W{l}"] = np.outer(d, a)
            grads[f"b{l}"] = d.copy()
        else:
            n = d.shape[0]
            grads[f"W{l}"] = d.T @ a / n
            grads[f"b{l}"] = d.sum(axis=0) / n
    return grads


def _check_error(model, e):
    e = np.asarray(e, dtype=np.float64)
    if e.shape[-1] != model.layer_dims[-1]:
        raise DimensionError(f"error width {e.shape[-1]} does not match output dim {model.layer_dims[-1]}")
    return e


def backward_bp(model: MlpModel, cache: ForwardCache, e) -> Gradients:
    """Exact chain rule: delta^(l) = (W^(l+1)^T delta^(l+1)) * g'(h^(l))."""
    e = _check_error(model, e)
    L = model.n_layers
    deltas = [None] * L
    deltas[L - 1] = e
    for l in range(L - 1, 0, -1):
        back = deltas[l] @ model.weights[l]
        deltas[l - 1] = back * activation_derivative(model.hidden_activation, cache.preactivations[l - 1])
    return Gradients(deltas, _param_grads(model, cache, deltas))


@dataclass
class FeedbackMatrixSet:
    """Fixed random feedback matrices B^(l) of shape (d_l, d_L), one per hidden layer."""

    matrices: list
    provenance: str = "digital_gaussian"

    @classmethod
    def digital_gaussian(cls, hidden_dims, d_out, seed=0, scale=1.0):
        """Disjoint row bands of one N(0, scale^2) matrix, in layer order."""
        rng = np.random.default_rng(seed)
        big = rng.normal(0.0, scale, size=(sum(hidden_dims), d_out))
        return cls(_bands(big, hidden_dims), "digital_gaussian")

    @classmethod
    def from_session(cls, session: OpuSession, hidden_dims):
        """Row bands of the session's effective real projection matrix."""
        if session.rows < sum(hidden_dims):
            raise DimensionError(f"session has {session.rows} rows, hidden layers need {sum(hidden_dims)}")
        return cls(_bands(session.effective_matrix(), hidden_dims), "opu_session_rows")

    def copy(self):
        return FeedbackMatrixSet([B.copy() for B in self.matrices], self.provenance)

    def stacked(self):
        return np.concatenate(self.matrices, axis=0)


def _bands(matrix, dims):
    out = []
    o = 0
    for d in dims:
        out.append(matrix[o:o + d].copy())
        o += d
    return out


def split_bands(s, dims):
    """Slice a projected signal (last axis = rows) into per-layer bands."""
    out = []
    o = 0
    for d in dims:
        out.append(s[..., o:o + d])
        o += d
    return out


def deltas_from_signals(model, cache, e, signals):
    """Hidden deltas s^(l) * g'(h^(l)); the output layer keeps the exact error.

    Each hidden delta depends only on its own signal and cached
    preactivation, so the layers can be processed in any order.
    """
    e = _check_error(model, e)
    deltas = []
    for l in range(1, model.n_layers):
        gp = activation_derivative(model.hidden_activation, cache.preactivations[l - 1])
        deltas.append(signals[l - 1] * gp)
    deltas.append(e)
    return deltas


def _reduce_error(e, granularity):
    if granularity == "per_batch" and e.ndim == 2:
        return e.mean(axis=0)
    if granularity not in ("per_batch", "per_sample"):
        raise ValueError(f"unknown projection granularity {granularity!r}")
    return e


def backward_dfa(model: MlpModel, cache: ForwardCache, e, feedback: FeedbackMatrixSet,
                 granularity: str = "per_sample") -> Gradients:
    e = _check_error(model, e)
    for B, d in zip(feedback.matrices, model.hidden_dims):
        if B.shape != (d, model.layer_dims[-1]):
            raise DimensionError(f"feedback matrix shape {B.shape} != ({d}, {model.layer_dims[-1]})")
    src = _reduce_error(e, granularity)
    signals = [src @ B.T for B in feedback.matrices]
    deltas = deltas_from_signals(model, cache, e, signals)
    return Gradients(deltas, _param_grads(model, cache, deltas))


def ternary_error(e, threshold):
    """``scale * (e+ - e-)`` row by row."""
    e = np.asarray(e, dtype=np.float64)
    vals, scales = ternarize_rows(np.atleast_2d(e), threshold)
    out = vals * scales[:, None]
    return out[0] if e.ndim == 1 else out


def backward_tdfa(model: MlpModel, cache: ForwardCache, e, feedback: FeedbackMatrixSet, threshold: float,
                  granularity: str = "per_sample") -> Gradients:
    e = _check_error(model, e)
    src = ternary_error(_reduce_error(e, granularity), threshold)
    signals = [src @ B.T for B in feedback.matrices]
    deltas = deltas_from_signals(model, cache, e, signals)
    return Gradients(deltas, _param_grads(model, cache, deltas))


def backward_odfa(model: MlpModel, cache: ForwardCache, e, session: OpuSession,
                  granularity: str = "per_sample") -> Gradients:
    e = _check_error(model, e)
    if session.rows < sum(model.hidden_dims):
        raise DimensionError(f"session has {session.rows} rows, hidden layers need {sum(model.hidden_dims)}")
    if session.cols != model.layer_dims[-1]:
        raise DimensionError(f"session has {session.cols} columns, output dim is {model.layer_dims[-1]}")
    src = _reduce_error(e, granularity)
    s = session.project_feedback(src) if src.ndim == 1 else session.project_feedback_batch(src)
    signals = split_bands(s, model.hidden_dims)
    deltas = deltas_from_signals(model, cache, e, signals)
    return Gradients(deltas, _param_grads(model, cache, deltas))


def backward_shlw(model: MlpModel, cache: ForwardCache, e) -> Gradients:
    """Only the output layer learns (exact gradient); hidden layers are frozen."""
    e = _check_error(model, e)
    deltas = [np.zeros_like(h) for h in cache.preactivations[:-1]] + [e]
    return Gradients(deltas, _param_grads(model, cache, deltas, trainable={model.n_layers}))


def alignment_probe(model: MlpModel, cache: ForwardCache, e, feedback: FeedbackMatrixSet):
    """Cosine between DFA and BP hidden deltas per hidden layer (None if either is zero)."""
    bp = backward_bp(model, cache, e).deltas
    dfa = backward_dfa(model, cache, e, feedback).deltas
    out = []
    for l in range(model.n_layers - 1):
        try:
            out.append(cosine_similarity(dfa[l], bp[l]))
        except UndefinedCorrelationError:
            out.append(None)
    return out
