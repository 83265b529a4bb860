import numpy as np
import pytest

from photon_dfa.mlp import FeedbackMatrixSet
from photon_dfa.opu import SessionConfig
from photon_dfa.training import ConfigError
from photon_dfa.transformer import (
    CharTokenizer,
    FeedbackSource,
    LMTrainConfig,
    TransformerConfig,
    TransformerModel,
    VocabTokenizer,
    backward_transformer,
    build_lm_session,
    count_parameters,
    forward_transformer,
    generate,
    lm_loss,
    load_model,
    parameter_names,
    projections_per_epoch,
    save_model,
    train_lm,
    window_starts,
)

from conftest import central_difference, rel_err

TINY = TransformerConfig(vocab_size=7, embed_dim=8, n_blocks=3, n_heads=2, mlp_dims=(8, 12, 8), context_size=5)


def tiny(seed=0, cfg=TINY):
    m = TransformerModel.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in m.params:  # move norms off their identity init so their gradients are exercised
        if k.endswith((".g", ".b")) and ("ln" in k):
            m.params[k] += rng.normal(0, 0.1, size=m.params[k].shape)
    return m


def batch(seed, cfg=TINY, B=2):
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size, (B, cfg.context_size)), rng.integers(0, cfg.vocab_size, (B, cfg.context_size))


@pytest.mark.parametrize("seed", range(3))
def test_bp_matches_finite_differences(seed):
    m = tiny(seed)
    x, y = batch(seed)
    logits, cache = forward_transformer(m, x)
    _, d = lm_loss(logits, y)
    grads, _ = backward_transformer(m, cache, d, "bp")
    assert set(grads) == set(m.params)
    for name, p in m.params.items():
        fd = central_difference(lambda: lm_loss(forward_transformer(m, x)[0], y)[0], p)
        if np.max(np.abs(fd)) < 1e-9 and np.max(np.abs(grads[name])) < 1e-12:
            continue  # e.g. attention key biases: softmax is invariant to them
        assert rel_err(grads[name], fd) < 1e-5, name


def test_parameter_count_matches_allocation():
    for cfg in (TINY, TransformerConfig(83)):
        assert TransformerModel.init(cfg).n_parameters() == count_parameters(cfg)
        assert len(parameter_names(cfg)) == len(TransformerModel.init(cfg).params)


def test_causality():
    m = tiny()
    x = np.array([1, 2, 3, 4, 5])
    a, _ = forward_transformer(m, x)
    x2 = x.copy()
    x2[3] = 0
    b, _ = forward_transformer(m, x2)
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_forward_contracts():
    m = tiny()
    logits, _ = forward_transformer(m, np.array([2]))
    assert logits.shape == (1, 7)
    with pytest.raises(ConfigError):
        forward_transformer(m, np.zeros(6, dtype=int))
    with pytest.raises(IndexError):
        forward_transformer(m, np.array([7]))
    zero = TransformerModel(TINY, {k: np.zeros_like(v) for k, v in m.params.items()})
    np.testing.assert_allclose(forward_transformer(zero, np.array([1, 2]))[0], 0.0)


def _grads(m, mode, source=None, seed=0):
    x, y = batch(seed)
    logits, cache = forward_transformer(m, x)
    _, d = lm_loss(logits, y)
    return backward_transformer(m, cache, d, mode, source)


def test_shlw_zeroes_all_but_last_block():
    m = tiny()
    g, _ = _grads(m, "shlw")
    bp, _ = _grads(m, "bp")
    for name, v in g.items():
        if name.startswith(f"blocks.{TINY.n_blocks - 1}.") or name.startswith(("ln_f", "proj")):
            np.testing.assert_array_equal(v, bp[name])
        else:
            assert not v.any(), name


@pytest.mark.parametrize("mode", ["dfa", "tdfa", "odfa"])
def test_last_block_is_exact_in_feedback_modes(mode):
    m = tiny()
    E = TINY.embed_dim
    fb = FeedbackMatrixSet.digital_gaussian([E, E], E, seed=1)
    src = FeedbackSource(fb, build_lm_session(TINY, 0), 0.3)
    g, _ = _grads(m, mode, src)
    bp, _ = _grads(m, "bp")
    for name in parameter_names(TINY):
        if name.startswith("blocks.2.") or name.startswith(("ln_f", "proj")):
            np.testing.assert_array_equal(g[name], bp[name])


def test_single_block_feedback_equals_bp():
    cfg = TransformerConfig(7, 8, 1, 2, (8, 12, 8), 5)
    m = tiny(cfg=cfg)
    g, _ = _grads(m, "dfa", FeedbackSource(FeedbackMatrixSet([]), None, None))
    bp, _ = _grads(m, "bp")
    for k in bp:
        np.testing.assert_array_equal(g[k], bp[k])


def test_block_gradients_depend_only_on_own_signal():
    m = tiny()
    E = TINY.embed_dim
    fb = FeedbackMatrixSet.digital_gaussian([E, E], E, seed=1)
    g1, _ = _grads(m, "dfa", FeedbackSource(fb))
    fb2 = FeedbackMatrixSet([fb.matrices[0], 5.0 * fb.matrices[1]])
    g2, _ = _grads(m, "dfa", FeedbackSource(fb2))
    for name in parameter_names(TINY):
        if name.startswith("blocks.0."):
            np.testing.assert_array_equal(g1[name], g2[name])
        if name.startswith("blocks.1.attn.W"):
            assert not np.array_equal(g1[name], g2[name])


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("granularity", ["per_sample", "per_batch"])
def test_odfa_equals_tdfa(seed, granularity):
    m = tiny(seed)
    E = TINY.embed_dim
    sess = SessionConfig(2 * E, E, tm_seed=seed, anchor_seed=seed + 1).build()
    fb = FeedbackMatrixSet.from_session(sess, [E, E])
    go, _ = _grads(m, "odfa", FeedbackSource(None, sess, 0.25, granularity), seed)
    gt, _ = _grads(m, "tdfa", FeedbackSource(fb, None, 0.25, granularity), seed)
    # key-bias gradients are exactly zero analytically; only rounding residue remains
    floor = 1e-6 * max(np.max(np.abs(v)) for v in gt.values())
    for k in gt:
        assert rel_err(go[k], gt[k], floor=floor) < 1e-9, k


def test_feedback_modes_need_sources():
    m = tiny()
    with pytest.raises(ConfigError):
        _grads(m, "dfa", FeedbackSource())
    with pytest.raises(ConfigError):
        _grads(m, "odfa", FeedbackSource())
    with pytest.raises(ConfigError):
        _grads(m, "backprop")


def test_tokenizers(tmp_path):
    t = CharTokenizer.from_corpus("aba")
    assert t.vocab == ["a", "b"] and list(t.encode("aba")) == [0, 1, 0]
    text = "JACK: Hi.\nCOLE: No.\n"
    t = CharTokenizer.from_corpus(text)
    assert t.decode(t.encode(text)) == text
    with pytest.raises(ValueError):
        t.encode("z")
    t.save(tmp_path / "tok.json")
    assert CharTokenizer.load(tmp_path / "tok.json").vocab == t.vocab
    (tmp_path / "vocab.txt").write_text("a\nab\nb\nabc\n")
    v = VocabTokenizer.from_file(tmp_path / "vocab.txt")
    assert [v.vocab[i] for i in v.encode("ababcb")] == ["ab", "abc", "b"]


def test_projection_count_per_epoch_is_windows_times_context():
    cfg = TransformerConfig(5, 8, 2, 2, (8, 12, 8), 6)
    tokens = np.random.default_rng(0).integers(0, 5, size=80)
    lc = LMTrainConfig(mode="odfa", epochs=1, batch_size=16, projection_granularity="per_sample",
                       threshold=0.3, val_fraction=0.0)
    sess = build_lm_session(cfg, 0)
    train_lm(TransformerModel.init(cfg), tokens, lc, session=sess)
    n = len(window_starts(80, 6))
    assert sess.step_counter == projections_per_epoch(80, cfg, 16, "per_sample") == n * 6


def test_train_lm_learns_and_is_deterministic():
    text = ("JACK: I know the car.\nCOLE: We fix the door.\n\n" * 20)
    tok = CharTokenizer.from_corpus(text)
    ids = tok.encode(text)
    cfg = TransformerConfig(tok.vocab_size, 16, 2, 2, (16, 24, 16), 8)
    traces = []
    for _ in range(2):
        m = TransformerModel.init(cfg, seed=0)
        traces.append(train_lm(m, ids, LMTrainConfig(mode="bp", epochs=2, batch_size=16, learning_rate=3e-3)))
    assert traces[0].final()["val_loss"] < traces[0].epochs[0]["val_loss"] - 1.0
    assert traces[0].rows(False) == traces[1].rows(False)


def test_generate_and_checkpoint(tmp_path):
    text = "JACK: The problem is not the problem.\n" * 5
    tok = CharTokenizer.from_corpus(text)
    cfg = TransformerConfig(tok.vocab_size, 8, 2, 2, (8, 12, 8), 8)
    m = TransformerModel.init(cfg, seed=1)
    prompt = "JACK: The problem is not the problem."
    assert generate(m, tok, prompt, 0) == prompt
    a = generate(m, tok, prompt, 20, seed=3)
    assert a == generate(m, tok, prompt, 20, seed=3) and a.startswith(prompt) and len(a) == len(prompt) + 20
    save_model(tmp_path / "m.bin", m, tok)
    m2, tok2 = load_model(tmp_path / "m.bin")
    assert tok2.vocab == tok.vocab
    assert generate(m2, tok2, prompt, 20, seed=3) == a
    assert generate(m, tok, prompt, 10, temperature=0) == generate(m, tok, prompt, 10, temperature=0, seed=9)
