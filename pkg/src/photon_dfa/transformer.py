"""A small pre-LayerNorm decoder-only transformer with per-block feedback training.

Shapes: a batch of windows is (B, T) token ids with T <= context_size;
hidden states are (B, T, E). Linear weights are stored (d_out, d_in) and
applied as ``x @ W.T + b``, as in the MLP module.

Backward modes
--------------
``bp``
    exact chain rule through every block and the embeddings.
``dfa`` / ``tdfa`` / ``odfa``
    the final LayerNorm, the projector and the last block get exact
    gradients. ``e_p``, the loss gradient at the last block's output, is
    projected once per position (or once per batch) into one E-wide band
    per remaining block. Each such block takes its band as the gradient
    of its output and backpropagates it internally with tanh' in place of
    relu' and with both residual skips cut. Block 1's input gradient
    feeds the embeddings.
``shlw``
    only the projector, final LayerNorm and last block are trained.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import OptimizerState, log_softmax
from .mlp import FeedbackMatrixSet, split_bands, ternary_error
from .opu import OpuSession, sample_transmission_matrix, select_threshold
from .training import ConfigError, NumericalFailure, TrainingTrace, config_hash

MODES = ("bp", "dfa", "tdfa", "odfa", "shlw")
LN_EPS = 1e-5


@dataclass
class TransformerConfig:
    vocab_size: int
    embed_dim: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_dims: tuple = (64, 96, 64)
    context_size: int = 24

    def __post_init__(self):
        self.mlp_dims = tuple(int(d) for d in self.mlp_dims)
        for name in ("vocab_size", "embed_dim", "n_blocks", "n_heads", "context_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if len(self.mlp_dims) < 2 or self.mlp_dims[0] != self.embed_dim or self.mlp_dims[-1] != self.embed_dim:
            raise ConfigError(f"mlp_dims {self.mlp_dims} must start and end at embed_dim {self.embed_dim}")

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads


def count_parameters(config: TransformerConfig) -> int:
    """Trainable parameters, computed from the config alone."""
    E, V, C = config.embed_dim, config.vocab_size, config.context_size
    attn = 4 * (E * E + E)
    mlp = sum(a * b + b for a, b in zip(config.mlp_dims[:-1], config.mlp_dims[1:]))
    norms = 2 * 2 * E
    block = attn + mlp + norms
    return V * E + C * E + config.n_blocks * block + 2 * E + (E * V + V)


def _block_names(config, k):
    p = f"blocks.{k}."
    names = [p + n for n in ("ln1.g", "ln1.b", "attn.Wq", "attn.bq", "attn.Wk", "attn.bk",
                             "attn.Wv", "attn.bv", "attn.Wo", "attn.bo", "ln2.g", "ln2.b")]
    for i in range(len(config.mlp_dims) - 1):
        names += [p + f"mlp.W{i}", p + f"mlp.b{i}"]
    return names


def parameter_names(config: TransformerConfig):
    names = ["tok_emb", "pos_emb"]
    for k in range(config.n_blocks):
        names += _block_names(config, k)
    return names + ["ln_f.g", "ln_f.b", "proj.W", "proj.b"]


@dataclass
class TransformerModel:
    config: TransformerConfig
    params: dict

    @classmethod
    def init(cls, config: TransformerConfig, seed=0):
        rng = np.random.default_rng(seed)
        E = config.embed_dim
        b = 1.0 / math.sqrt(E)
        P = {"tok_emb": rng.uniform(-b, b, size=(config.vocab_size, E)),
             "pos_emb": rng.uniform(-b, b, size=(config.context_size, E))}

        def linear(wname, bname, d_out, d_in):
            bound = 1.0 / math.sqrt(d_in)
            P[wname] = rng.uniform(-bound, bound, size=(d_out, d_in))
            P[bname] = rng.uniform(-bound, bound, size=d_out)

        for k in range(config.n_blocks):
            p = f"blocks.{k}."
            P[p + "ln1.g"], P[p + "ln1.b"] = np.ones(E), np.zeros(E)
            for x in "qkvo":
                linear(p + f"attn.W{x}", p + f"attn.b{x}", E, E)
            P[p + "ln2.g"], P[p + "ln2.b"] = np.ones(E), np.zeros(E)
            for i, (d_in, d_out) in enumerate(zip(config.mlp_dims[:-1], config.mlp_dims[1:])):
                linear(p + f"mlp.W{i}", p + f"mlp.b{i}", d_out, d_in)
        P["ln_f.g"], P["ln_f.b"] = np.ones(E), np.zeros(E)
        linear("proj.W", "proj.b", config.vocab_size, E)
        return cls(config, P)

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        return TransformerModel(TransformerConfig(**asdict(self.config)),
                                {k: v.copy() for k, v in self.params.items()})


# -- layers ---------------------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def _lin(x, W, b):
    return x @ W.T + b


def _lin_back(dy, x, W):
    E_in = x.shape[-1]
    dW = dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, E_in)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ W, dW, db


def _causal_mask(T):
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def _attn_forward(a, P, p, n_heads):
    B, T, E = a.shape
    d = E // n_heads
    q = _lin(a, P[p + "attn.Wq"], P[p + "attn.bq"])
    k = _lin(a, P[p + "attn.Wk"], P[p + "attn.bk"])
    v = _lin(a, P[p + "attn.Wv"], P[p + "attn.bv"])
    split = lambda z: z.reshape(B, T, n_heads, d).transpose(0, 2, 1, 3)
    qh, kh, vh = split(q), split(k), split(v)
    s = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(d)
    s = np.where(_causal_mask(T), -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    att = np.exp(s)
    att /= att.sum(axis=-1, keepdims=True)
    yh = att @ vh
    y = yh.transpose(0, 2, 1, 3).reshape(B, T, E)
    o = _lin(y, P[p + "attn.Wo"], P[p + "attn.bo"])
    return o, {"a": a, "qh": qh, "kh": kh, "vh": vh, "att": att, "y": y}


def _attn_backward(do, P, p, c, n_heads, grads):
    B, T, E = do.shape
    d = E // n_heads
    dy, grads[p + "attn.Wo"], grads[p + "attn.bo"] = _lin_back(do, c["y"], P[p + "attn.Wo"])
    dyh = dy.reshape(B, T, n_heads, d).transpose(0, 2, 1, 3)
    att = c["att"]
    datt = dyh @ c["vh"].transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ dyh
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / math.sqrt(d)
    dqh = ds @ c["kh"]
    dkh = ds.transpose(0, 1, 3, 2) @ c["qh"]
    merge = lambda z: z.transpose(0, 2, 1, 3).reshape(B, T, E)
    da = np.zeros_like(c["a"])
    for x, dz in (("q", dqh), ("k", dkh), ("v", dvh)):
        dxa, grads[p + f"attn.W{x}"], grads[p + f"attn.b{x}"] = _lin_back(merge(dz), c["a"], P[p + f"attn.W{x}"])
        da += dxa
    return da


def _block_forward(x, P, p, config):
    a, ln1 = _ln_forward(x, P[p + "ln1.g"], P[p + "ln1.b"])
    o, attn = _attn_forward(a, P, p, config.n_heads)
    x1 = x + o
    m, ln2 = _ln_forward(x1, P[p + "ln2.g"], P[p + "ln2.b"])
    zs, hs = [], [m]
    h = m
    n_lin = len(config.mlp_dims) - 1
    for i in range(n_lin):
        z = _lin(h, P[p + f"mlp.W{i}"], P[p + f"mlp.b{i}"])
        zs.append(z)
        h = np.maximum(z, 0.0) if i < n_lin - 1 else z
        hs.append(h)
    return x1 + h, {"ln1": ln1, "attn": attn, "ln2": ln2, "zs": zs, "hs": hs}


def _block_backward(dout, P, p, c, config, exact: bool):
    """Gradient of one block given the gradient at its output.

    ``exact=False`` applies the feedback-mode rules: tanh' for relu' and no
    backward signal through the residual skips.
    """
    grads = {}
    n_lin = len(config.mlp_dims) - 1
    dh = dout
    for i in range(n_lin - 1, -1, -1):
        if i < n_lin - 1:
            z = c["zs"][i]
            dh = dh * ((z > 0.0) if exact else (1.0 - np.tanh(z) ** 2))
        dh, grads[p + f"mlp.W{i}"], grads[p + f"mlp.b{i}"] = _lin_back(dh, c["hs"][i], P[p + f"mlp.W{i}"])
    dx1, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_backward(dh, P[p + "ln2.g"], c["ln2"])
    if exact:
        dx1 = dx1 + dout
    da = _attn_backward(dx1, P, p, c["attn"], config.n_heads, grads)
    dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_backward(da, P[p + "ln1.g"], c["ln1"])
    if exact:
        dx = dx + dx1
    return dx, grads


# -- model forward / backward ---------------------------------------------------


@dataclass
class TransformerCache:
    tokens: np.ndarray
    x0: np.ndarray
    blocks: list
    block_outputs: list
    ln_f: tuple
    f: np.ndarray


def forward_transformer(model: TransformerModel, tokens):
    """Logits (B, T, V) (or (T, V) for a 1-D window) and the backward cache."""
    cfg, P = model.config, model.params
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    tok = np.atleast_2d(tokens).astype(np.int64)
    T = tok.shape[1]
    if T < 1 or T > cfg.context_size:
        raise ConfigError(f"sequence length {T} outside [1, context_size={cfg.context_size}]")
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise IndexError(f"token index outside [0, {cfg.vocab_size})")
    x = P["tok_emb"][tok] + P["pos_emb"][:T]
    x0 = x
    caches, outs = [], []
    for k in range(cfg.n_blocks):
        x, c = _block_forward(x, P, f"blocks.{k}.", cfg)
        caches.append(c)
        outs.append(x)
    f, lnf = _ln_forward(x, P["ln_f.g"], P["ln_f.b"])
    logits = _lin(f, P["proj.W"], P["proj.b"])
    cache = TransformerCache(tok, x0, caches, outs, lnf, f)
    return (logits[0] if single else logits), cache


def lm_loss(logits, targets):
    """Mean next-token cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    targets = np.asarray(targets).astype(np.int64)
    lp = log_softmax(logits)
    n = targets.size
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = -float(picked.sum()) / n
    d = np.exp(lp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, d / n


@dataclass
class FeedbackSource:
    """What supplies the projected signal in feedback modes."""

    feedback: FeedbackMatrixSet | None = None
    session: OpuSession | None = None
    threshold: float | None = None
    granularity: str = "per_sample"


def project_block_signals(e_p, mode, source: FeedbackSource, n_bands, E):
    """Per-block signals, each shaped like ``e_p`` (B, T, E)."""
    B, T, _ = e_p.shape
    rows = e_p.reshape(B * T, E)
    if source.granularity == "per_batch":
        rows = rows.mean(axis=0, keepdims=True)
    elif source.granularity != "per_sample":
        raise ConfigError(f"unknown projection granularity {source.granularity!r}")
    dims = [E] * n_bands
    if mode == "odfa":
        sess = source.session
        if sess is None:
            raise ConfigError("odfa mode needs an OpuSession")
        if sess.rows < n_bands * E or sess.cols != E:
            raise ConfigError(f"session {sess.rows}x{sess.cols} cannot serve {n_bands} blocks of width {E}")
        if source.threshold is not None:
            sess.threshold = source.threshold
        s = sess.project_feedback_batch(rows)
        bands = split_bands(s, dims)
    else:
        if source.feedback is None:
            raise ConfigError(f"{mode} mode needs a FeedbackMatrixSet")
        src = rows
        if mode == "tdfa":
            if source.threshold is None:
                raise ConfigError("tdfa mode needs a threshold")
            src = ternary_error(rows, source.threshold)
        bands = [src @ Bm.T for Bm in source.feedback.matrices]
    return [np.broadcast_to(b, (B * T, E)).reshape(B, T, E) if b.shape[0] == 1 else b.reshape(B, T, E)
            for b in bands]


def backward_transformer(model: TransformerModel, cache: TransformerCache, dlogits, mode="bp",
                         source: FeedbackSource | None = None):
    """Gradients for every parameter (zeros where a mode trains nothing).

    Returns ``(grads, e_p)``; ``e_p`` is the loss gradient at the last
    block's output, the error that feedback modes project.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg, P = model.config, model.params
    dlogits = np.asarray(dlogits)
    single = dlogits.ndim == 2
    if single:
        dlogits = dlogits[None]
    grads = {}
    df, grads["proj.W"], grads["proj.b"] = _lin_back(dlogits, cache.f, P["proj.W"])
    e_p, grads["ln_f.g"], grads["ln_f.b"] = _ln_backward(df, P["ln_f.g"], cache.ln_f)
    L = cfg.n_blocks
    last = f"blocks.{L - 1}."
    dx, g = _block_backward(e_p, P, last, cache.blocks[L - 1], cfg, exact=True)
    grads.update(g)
    if mode == "bp":
        for k in range(L - 2, -1, -1):
            dx, g = _block_backward(dx, P, f"blocks.{k}.", cache.blocks[k], cfg, exact=True)
            grads.update(g)
        d_embed = dx
    elif mode == "shlw":
        for k in range(L - 1):
            for n in _block_names(cfg, k):
                grads[n] = np.zeros_like(P[n])
        d_embed = None
    else:
        if L > 1:
            signals = project_block_signals(e_p, mode, source or FeedbackSource(), L - 1, cfg.embed_dim)
            for k in range(L - 1):
                dxk, g = _block_backward(signals[k], P, f"blocks.{k}.", cache.blocks[k], cfg, exact=False)
                grads.update(g)
                if k == 0:
                    d_embed = dxk
        else:
            d_embed = dx
    if d_embed is None:
        grads["tok_emb"] = np.zeros_like(P["tok_emb"])
        grads["pos_emb"] = np.zeros_like(P["pos_emb"])
    else:
        gt = np.zeros_like(P["tok_emb"])
        np.add.at(gt, cache.tokens.ravel(), d_embed.reshape(-1, cfg.embed_dim))
        gp = np.zeros_like(P["pos_emb"])
        T = cache.tokens.shape[1]
        gp[:T] = d_embed.sum(axis=0)
        grads["tok_emb"], grads["pos_emb"] = gt, gp
    return grads, (e_p[0] if single else e_p)


# -- tokenizers -----------------------------------------------------------------


class CharTokenizer:
    """Characters sorted by code point; indices follow that order."""

    kind = "char"

    def __init__(self, vocab):
        self.vocab = list(vocab)
        self.index = {ch: i for i, ch in enumerate(self.vocab)}

    @classmethod
    def from_corpus(cls, text: str):
        if not text:
            raise ValueError("empty corpus")
        return cls(sorted(set(text)))

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode(self, text: str):
        try:
            return np.array([self.index[ch] for ch in text], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown character {exc.args[0]!r}") from None

    def decode(self, ids) -> str:
        return "".join(self.vocab[int(i)] for i in ids)

    def to_json(self):
        return json.dumps({"kind": self.kind, "vocab": self.vocab}, ensure_ascii=False)

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @staticmethod
    def load(path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        if d.get("kind") == "subword":
            return VocabTokenizer(d["vocab"])
        return CharTokenizer(d["vocab"])


class VocabTokenizer(CharTokenizer):
    """Greedy longest-match tokenizer over an external vocabulary (one token per line)."""

    kind = "subword"

    def __init__(self, vocab):
        super().__init__(vocab)
        self.max_len = max(len(t) for t in self.vocab)

    @classmethod
    def from_file(cls, path):
        tokens = [ln.rstrip("\n") for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        tokens = [t.replace("\\n", "\n") for t in tokens if t]
        if not tokens:
            raise ValueError(f"{path}: empty vocabulary")
        return cls(tokens)

    def encode(self, text: str):
        out, i = [], 0
        while i < len(text):
            for n in range(min(self.max_len, len(text) - i), 0, -1):
                j = self.index.get(text[i:i + n])
                if j is not None:
                    out.append(j)
                    i += n
                    break
            else:
                raise ValueError(f"unknown character {text[i]!r}")
        return np.array(out, dtype=np.int64)


def tokenize(corpus: str, vocab_file=None):
    tok = VocabTokenizer.from_file(vocab_file) if vocab_file else CharTokenizer.from_corpus(corpus)
    return tok, tok.encode(corpus)


# -- training -------------------------------------------------------------------


@dataclass
class LMTrainConfig:
    mode: str = "bp"
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    projection_granularity: str = "per_batch"
    threshold: float | None = None
    val_fraction: float = 0.05
    window_stride: int = 1
    feedback_scale: float = 1.0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.projection_granularity not in ("per_batch", "per_sample"):
            raise ConfigError(f"unknown projection granularity {self.projection_granularity!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.window_stride < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, window_stride >= 1 and learning_rate > 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def hash(self):
        return config_hash(asdict(self))


def window_starts(n_tokens, context_size, stride=1):
    """Start offsets of all full (input, next-token target) windows."""
    n = n_tokens - context_size
    if n < 1:
        raise ConfigError(f"need more than context_size={context_size} tokens, got {n_tokens}")
    return np.arange(0, n, stride)


def _windows(tokens, starts, C):
    idx = starts[:, None] + np.arange(C)[None, :]
    return tokens[idx], tokens[idx + 1]


def build_lm_session(config: TransformerConfig, seed=0, noise=None, latency=None):
    rows = max(1, config.n_blocks - 1) * config.embed_dim
    tm = sample_transmission_matrix(rows, config.embed_dim, seed=seed + 7919)
    return OpuSession(tm, noise=noise, latency=latency, anchor_seed=seed + 104729)


def evaluate_lm(model, tokens, starts, batch_size=256):
    C = model.config.context_size
    total, correct, n = 0.0, 0, 0
    for i in range(0, len(starts), batch_size):
        x, y = _windows(tokens, starts[i:i + batch_size], C)
        logits, _ = forward_transformer(model, x)
        loss, _ = lm_loss(logits, y)
        total += loss * y.size
        correct += int((logits.argmax(axis=-1) == y).sum())
        n += y.size
    return total / n, correct / n


def train_lm(model: TransformerModel, tokens, config: LMTrainConfig, feedback: FeedbackMatrixSet | None = None,
             session: OpuSession | None = None, progress=None) -> TrainingTrace:
    """Next-token training over sliding windows with Adam and cosine decay to zero."""
    config.validate()
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    C = cfg.context_size
    n_val = int(round(config.val_fraction * len(tokens)))
    train_tok, val_tok = tokens[:len(tokens) - n_val], tokens[len(tokens) - n_val:]
    starts = window_starts(len(train_tok), C, config.window_stride)
    val_starts = window_starts(len(val_tok), C, C) if n_val > C else np.zeros(0, dtype=np.int64)
    mode = config.mode
    n_bands = max(1, cfg.n_blocks - 1)
    if mode in ("dfa", "tdfa") and feedback is None:
        feedback = FeedbackMatrixSet.digital_gaussian([cfg.embed_dim] * n_bands, cfg.embed_dim,
                                                      seed=config.seed + 31, scale=config.feedback_scale)
    if mode == "odfa" and session is None:
        session = build_lm_session(cfg, config.seed)
    source = FeedbackSource(feedback, session, config.threshold, config.projection_granularity)

    opt = OptimizerState(kind="adam", learning_rate=config.learning_rate)
    steps_per_epoch = math.ceil(len(starts) / config.batch_size)
    total_steps = max(1, steps_per_epoch * config.epochs)
    trace = TrainingTrace(config.hash(), 0)
    rng = np.random.default_rng([config.seed, 0x1A])

    def record(epoch, step):
        rec = {"epoch": epoch, "step": step, "alignment": [],
               "optical_seconds": session.optical_seconds if session is not None else 0.0, "wall_seconds": 0.0}
        if len(val_starts):
            rec["val_loss"], rec["val_accuracy"] = evaluate_lm(model, val_tok, val_starts)
        trace.epochs.append(rec)
        if progress:
            progress(rec)

    record(0, 0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = starts[rng.permutation(len(starts))]
        for i in range(0, len(order), config.batch_size):
            x, y = _windows(tokens, order[i:i + config.batch_size], C)
            logits, cache = forward_transformer(model, x)
            loss, dlog = lm_loss(logits, y)
            if not math.isfinite(loss):
                raise NumericalFailure(f"non-finite loss at step {step}")
            if mode in ("tdfa", "odfa") and source.threshold is None:
                e_p = backward_transformer(model, cache, dlog, "shlw")[1]
                e0 = e_p.reshape(-1, cfg.embed_dim)
                if source.granularity == "per_batch":
                    e0 = e0.mean(axis=0)
                source.threshold = select_threshold(e0, session if mode == "odfa" else feedback.stacked())
            grads, _ = backward_transformer(model, cache, dlog, mode, source)
            lr_scale = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            opt.apply_update(model.params, grads, lr_scale)
            step += 1
            trace.steps.append((step, loss))
            if session is not None:
                session.end_step()
        record(epoch, step)
    trace.threshold = source.threshold
    return trace


def projections_per_epoch(n_tokens, config: TransformerConfig, batch_size, granularity, stride=1):
    """Optical feedback signals per epoch: N x C per_sample, one per step per_batch."""
    n = len(window_starts(n_tokens, config.context_size, stride))
    if granularity == "per_sample":
        return n * config.context_size
    return math.ceil(n / batch_size)


def generate(model: TransformerModel, tokenizer: CharTokenizer, prompt: str, n_tokens: int,
             temperature: float = 1.0, seed: int = 0) -> str:
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    ids = list(tokenizer.encode(prompt))
    if n_tokens == 0:
        return prompt
    if not ids:
        raise ValueError("prompt must contain at least one token")
    rng = np.random.default_rng(seed)
    C = model.config.context_size
    for _ in range(n_tokens):
        logits, _ = forward_transformer(model, np.array(ids[-C:]))
        last = logits[-1]
        if temperature == 0:
            nxt = int(np.argmax(last))
        else:
            lp = log_softmax(last / temperature)
            nxt = int(rng.choice(len(lp), p=np.exp(lp) / np.exp(lp).sum()))
        ids.append(nxt)
    return tokenizer.decode(ids)


def save_model(path, model: TransformerModel, tokenizer: CharTokenizer | None = None, meta: dict | None = None):
    from .checkpoint import save_tensors

    m = {"kind": "transformer", "config": asdict(model.config), **(meta or {})}
    if tokenizer is not None:
        m["tokenizer"] = json.loads(tokenizer.to_json())
    save_tensors(path, {n: model.params[n] for n in parameter_names(model.config)}, m)


def load_model(path):
    from .checkpoint import CheckpointError, load_tensors

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "transformer":
        raise CheckpointError(f"{path}: not a transformer checkpoint")
    cfg = TransformerConfig(**meta["config"])
    tok = None
    if "tokenizer" in meta:
        t = meta["tokenizer"]
        tok = VocabTokenizer(t["vocab"]) if t.get("kind") == "subword" else CharTokenizer(t["vocab"])
    return TransformerModel(cfg, tensors), tok
