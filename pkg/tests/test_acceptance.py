"""Exit criteria 1-10 at their stated tolerances.

Every test records one line per criterion part; the terminal summary prints
one PASS/FAIL line per criterion. Long training runs are marked ``slow``.
"""

import time

import numpy as np
import pytest

from photon_dfa import cli
from photon_dfa.bench import coefficient_of_variation, fit_scaling, scan_widths, summarize
from photon_dfa.core import batch_softmax_cross_entropy, pearson_correlation
from photon_dfa.data import synthetic_digits
from photon_dfa.metrics import GridField, global_nrmse, spatial_nrmse, total_nrmse
from photon_dfa.mlp import FeedbackMatrixSet, MlpModel, backward_bp, backward_odfa, backward_tdfa, forward_mlp
from photon_dfa.opu import LatencyModel, NoiseSpec, SessionConfig, calibrate_drift_sigma, stability_trace
from photon_dfa.training import TrainConfig, build_session, train
from photon_dfa.transformer import (
    FeedbackSource,
    LMTrainConfig,
    TransformerConfig,
    TransformerModel,
    backward_transformer,
    build_lm_session,
    count_parameters,
    forward_transformer,
    lm_loss,
    projections_per_epoch,
    train_lm,
)

from conftest import central_difference, record_criterion, rel_err

pytestmark = pytest.mark.acceptance

DIMS = [784, 100, 10]
EPOCHS = 50


@pytest.fixture(scope="module")
def digits():
    # offline stand-in for MNIST; difficulty pinned so BP lands near 98.5%
    return synthetic_digits(n_train=20000, n_test=2000, seed=0)


def run_mlp(ds, alg, noise=None, session=None, epochs=EPOCHS, seed=0):
    cfg = TrainConfig(algorithm=alg, batch_size=100, epochs=epochs, seed=seed,
                      optimizer={"kind": "sgd_momentum", "learning_rate": 0.01, "momentum": 0.9},
                      noise=noise or NoiseSpec(), projection_granularity="per_sample")
    return train(MlpModel.init(DIMS, seed=seed), ds, cfg, session=session)


# 1 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_1_mlp_protocol(digits):
    t0 = time.perf_counter()
    acc = {a: run_mlp(digits, a).final()["test_accuracy"] for a in ("bp", "dfa", "tdfa")}
    minutes = (time.perf_counter() - t0) / 60
    ok = [
        record_criterion(1, "a", acc["bp"] >= 0.95, f"BP test accuracy {acc['bp']:.4f} >= 0.95"),
        record_criterion(1, "b", abs(acc["bp"] - acc["dfa"]) <= 0.02,
                         f"|BP - DFA| = {abs(acc['bp'] - acc['dfa']):.4f} <= 0.02 (DFA {acc['dfa']:.4f})"),
        record_criterion(1, "c", abs(acc["dfa"] - acc["tdfa"]) <= 0.015,
                         f"|DFA - TDFA| = {abs(acc['dfa'] - acc['tdfa']):.4f} <= 0.015 (TDFA {acc['tdfa']:.4f})"),
        record_criterion(1, "d", minutes <= 15, f"runtime {minutes:.2f} min <= 15"),
    ]
    assert all(ok)


# 2 ---------------------------------------------------------------------------

def _mlp_case(rng):
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(4, 40))] + [int(rng.integers(3, 30)) for _ in range(depth)] + [int(rng.integers(2, 11))]
    m = MlpModel.init(dims, seed=int(rng.integers(1 << 30)))
    sess = SessionConfig(sum(dims[1:-1]), dims[-1], tm_seed=int(rng.integers(1 << 30)),
                         anchor_seed=int(rng.integers(1 << 30))).build()
    sess.threshold = float(rng.integers(0, 101)) / 100
    n = int(rng.integers(1, 9))
    cache = forward_mlp(m, rng.normal(size=(n, dims[0])))
    _, e = batch_softmax_cross_entropy(cache.logits, rng.integers(0, dims[-1], size=n))
    gran = "per_sample" if rng.random() < 0.5 else "per_batch"
    go = backward_odfa(m, cache, e, sess, gran).grads
    gt = backward_tdfa(m, cache, e, FeedbackMatrixSet.from_session(sess, m.hidden_dims), sess.threshold, gran).grads
    return max(rel_err(go[k], gt[k]) for k in gt)


def _transformer_case(rng):
    E = int(rng.choice([8, 12, 16]))
    cfg = TransformerConfig(int(rng.integers(5, 12)), E, int(rng.integers(2, 4)), 2,
                            (E, int(rng.integers(8, 24)), E), int(rng.integers(3, 8)))
    m = TransformerModel.init(cfg, seed=int(rng.integers(1 << 30)))
    sess = build_lm_session(cfg, seed=int(rng.integers(1 << 30)))
    thr = float(rng.integers(0, 101)) / 100
    fb = FeedbackMatrixSet.from_session(sess, [E] * (cfg.n_blocks - 1))
    gran = "per_sample" if rng.random() < 0.5 else "per_batch"
    x = rng.integers(0, cfg.vocab_size, size=(2, cfg.context_size))
    y = rng.integers(0, cfg.vocab_size, size=(2, cfg.context_size))
    logits, cache = forward_transformer(m, x)
    _, d = lm_loss(logits, y)
    go, _ = backward_transformer(m, cache, d, "odfa", FeedbackSource(None, sess, thr, gran))
    gt, _ = backward_transformer(m, cache, d, "tdfa", FeedbackSource(fb, None, thr, gran))
    # attention key biases have an identically zero gradient; judge them against the overall scale
    floor = 1e-6 * max(np.max(np.abs(v)) for v in gt.values())
    return max(rel_err(go[k], gt[k], floor=floor) for k in gt)


def test_criterion_2_odfa_equals_tdfa():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mlp = max(_mlp_case(rng) for _ in range(50))
    tf = max(_transformer_case(rng) for _ in range(10))
    secs = time.perf_counter() - t0
    ok = [
        record_criterion(2, "a", mlp < 1e-6, f"50 MLP cases, max rel err {mlp:.2e} < 1e-6"),
        record_criterion(2, "b", tf < 1e-6, f"10 transformer cases, max rel err {tf:.2e} < 1e-6"),
        record_criterion(2, "c", secs <= 120, f"runtime {secs:.1f} s <= 120"),
    ]
    assert all(ok)


# 3 ---------------------------------------------------------------------------

def test_criterion_3_linear_recovery():
    s = SessionConfig(200, 256, tm_seed=3, anchor_seed=4).build()
    rng = np.random.default_rng(3)
    add = hom = 0.0
    for _ in range(100):
        a, b = rng.normal(size=256), rng.normal(size=256)
        c = float(rng.uniform(-5, 5))
        sa, sb = s.linear_project(a, validation=True), s.linear_project(b, validation=True)
        add = max(add, rel_err(s.linear_project(a + b, validation=True), sa + sb))
        hom = max(hom, rel_err(s.linear_project(c * a, validation=True), c * sa))
    zero = s.linear_project(np.zeros(256))
    at_r = s.linear_project(s.anchor.r, validation=True)
    r_err = rel_err(at_r, np.sqrt(s.anchor_intensity))
    ok = [
        record_criterion(3, "a", add < 1e-9, f"additivity max rel err {add:.2e} < 1e-9"),
        record_criterion(3, "b", hom < 1e-9, f"homogeneity max rel err {hom:.2e} < 1e-9"),
        record_criterion(3, "c", not zero.any(), "e = 0 projects to exactly 0"),
        # I_r / sqrt(I_r) against sqrt(I_r): equal up to the last-bit rounding of the division
        record_criterion(3, "d", r_err <= 2.3e-16, f"e = r gives sqrt(I_r), rel err {r_err:.1e} (1 ulp)"),
    ]
    assert all(ok)


# 4 ---------------------------------------------------------------------------

def _mlp_fd(seed):
    rng = np.random.default_rng(seed)
    dims = [6, 8, 7, 4]
    m = MlpModel.init(dims, seed=seed)
    X, y = rng.normal(size=(5, 6)), rng.integers(0, 4, size=5)
    cache = forward_mlp(m, X)
    _, e = batch_softmax_cross_entropy(cache.logits, y)
    g = backward_bp(m, cache, e).grads
    return max(rel_err(g[k], central_difference(lambda: batch_softmax_cross_entropy(forward_mlp(m, X).logits, y)[0], p))
               for k, p in m.params().items())


def _transformer_fd(seed):
    rng = np.random.default_rng(seed)
    cfg = TransformerConfig(6, 8, 2, 2, (8, 10, 8), 4)
    m = TransformerModel.init(cfg, seed=seed)
    for k in m.params:
        if ".ln" in k or k.startswith("ln_f"):
            m.params[k] += rng.normal(0, 0.1, size=m.params[k].shape)
    x, y = rng.integers(0, 6, size=(2, 4)), rng.integers(0, 6, size=(2, 4))
    logits, cache = forward_transformer(m, x)
    _, d = lm_loss(logits, y)
    g, _ = backward_transformer(m, cache, d, "bp")
    worst = 0.0
    for k, p in m.params.items():
        fd = central_difference(lambda: lm_loss(forward_transformer(m, x)[0], y)[0], p)
        if np.max(np.abs(fd)) < 1e-9 and np.max(np.abs(g[k])) < 1e-12:
            continue  # attention key biases: the true gradient is exactly zero
        worst = max(worst, rel_err(g[k], fd))
    return worst


def test_criterion_4_gradient_check():
    mlp = max(_mlp_fd(s) for s in range(20))
    tf = max(_transformer_fd(s) for s in range(20))
    ok = [
        record_criterion(4, "a", mlp < 1e-6, f"MLP BP vs central differences, 20 seeds, max rel err {mlp:.2e} < 1e-6"),
        record_criterion(4, "b", tf < 1e-5, f"transformer, 20 seeds, max rel err {tf:.2e} < 1e-5"),
    ]
    assert all(ok)


# 5 ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def clean_odfa(digits):
    return run_mlp(digits, "odfa")


@pytest.mark.slow
def test_criterion_5a_small_tm_noise(digits, clean_odfa):
    t0 = time.perf_counter()
    base = clean_odfa.final()["test_accuracy"]
    noisy = run_mlp(digits, "odfa", NoiseSpec("tm_noise", 0.05, seed=1)).final()["test_accuracy"]
    ok = record_criterion(5, "a", abs(noisy - base) <= 0.01,
                          f"tm_noise 0.05 accuracy {noisy:.4f} vs noiseless {base:.4f} "
                          f"({time.perf_counter() - t0:.0f} s)")
    assert ok


@pytest.mark.slow
def test_criterion_5b_large_tm_noise_overfits(digits):
    tr = run_mlp(digits, "odfa", NoiseSpec("tm_noise", 0.5, seed=1))
    v = np.array([r["val_loss"] for r in tr.epochs])
    k = int(np.argmin(v))
    rises = k < len(v) - 1 and v[-1] - v[k] >= 0.01
    in_band = 0.4 <= v[-1] <= 0.8
    ok = record_criterion(5, "b", rises and in_band,
                          f"tm_noise 0.5 val loss min {v[k]:.3f} at epoch {k}, final {v[-1]:.3f}; "
                          f"need a rise >= 0.01 after the minimum and final in [0.4, 0.8]")
    assert ok


@pytest.mark.slow
def test_criterion_5c_drift(digits, clean_odfa):
    steps = EPOCHS * int(np.ceil(len(digits.y_train) * 0.9 / 100))
    model = MlpModel.init(DIMS, seed=0)
    probe = np.random.default_rng(5).choice([-1.0, 1.0], size=10)
    base = build_session(model, TrainConfig(seed=0, noise=NoiseSpec("drift", 0.0, seed=2)))
    sigma = calibrate_drift_sigma(base, probe, steps, target_pcc=0.54)
    sess = build_session(model, TrainConfig(seed=0, noise=NoiseSpec("drift", sigma, seed=2)))
    s0 = sess.linear_project(probe)
    tr = run_mlp(digits, "odfa", sess.noise, session=sess)
    assert sess.drift_count == steps
    pcc = pearson_correlation(sess.linear_project(probe), s0)
    acc, ref = tr.final()["test_accuracy"], clean_odfa.final()["test_accuracy"]
    ok = [
        record_criterion(5, "c1", abs(pcc - 0.54) <= 0.05, f"drift sigma {sigma:.3e} ends at PCC {pcc:.4f}"),
        record_criterion(5, "c2", abs(acc - ref) <= 0.02, f"drift accuracy {acc:.4f} vs no drift {ref:.4f}"),
    ]
    assert all(ok)


def test_criterion_5_stability_trace_shape():
    s = SessionConfig(100, 10, tm_seed=1, anchor_seed=2, noise=NoiseSpec("drift", 0.0, seed=2)).build()
    probe = np.random.default_rng(5).choice([-1.0, 1.0], size=10)
    flat = stability_trace(s.clone(), probe, 50, 10)
    ok = record_criterion(5, "d", all(p == 1.0 for _, p in flat), "zero drift keeps PCC at 1")
    assert ok


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_alignment():
    toy = synthetic_digits(n_train=2000, n_test=200, seed=11)
    wins, lines = 0, []
    for seed in range(10):
        cfg = TrainConfig(algorithm="dfa", batch_size=50, epochs=5, seed=seed, projection_granularity="per_sample")
        tr = train(MlpModel.init([784, 100, 100, 10], seed=seed), toy, cfg)
        a0 = float(np.mean(tr.epochs[0]["alignment"]))
        a1 = float(np.mean(tr.final()["alignment"]))
        wins += abs(a0) < 0.3 and a1 > a0
        lines.append(f"{a0:+.2f}->{a1:+.2f}")
    ok = record_criterion(6, "", wins >= 8, f"{wins}/10 seeds small at init and larger after DFA: {' '.join(lines)}")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7a_parameter_count():
    cfg = TransformerConfig(vocab_size=1016, embed_dim=2040, n_blocks=40, n_heads=10,
                            mlp_dims=(2040, 2060, 2040), context_size=24)
    n = count_parameters(cfg)
    ok = record_criterion(7, "a", n == 1_070_063_120,
                          f"counted {n:,} trainable parameters, target 1,070,063,120 "
                          f"(difference {1_070_063_120 - n:,})")
    assert ok


def test_criterion_7b_projection_count():
    cfg = TransformerConfig(9, 8, 3, 2, (8, 12, 8), 6)
    tokens = np.random.default_rng(0).integers(0, 9, size=150)
    sess = build_lm_session(cfg, 0)
    lc = LMTrainConfig(mode="odfa", epochs=1, batch_size=16, projection_granularity="per_sample", threshold=0.3,
                       val_fraction=0.0)
    train_lm(TransformerModel.init(cfg), tokens, lc, session=sess)
    n_windows = 150 - 6
    expected = n_windows * 6
    ok = record_criterion(7, "b", sess.step_counter == expected == projections_per_epoch(150, cfg, 16, "per_sample"),
                          f"one epoch issued {sess.step_counter} projections, N x C = {n_windows} x 6 = {expected}")
    assert ok


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_scaling(tmp_path):
    t0 = time.perf_counter()
    widths = [128, 256, 384, 512, 768, 1024, 1536]
    points = scan_widths([1, 2, 4], widths, ("bp", "odfa"), LatencyModel(), samples=60, clock="wall",
                         out_csv=tmp_path / "points.csv")
    summary = summarize(points, LatencyModel())
    r2 = min(fit_scaling([p for p in points if p.algorithm == "bp" and p.depth == d]).r_squared for d in (1, 2, 4))
    cv = max(coefficient_of_variation([p.optical for p in points if p.algorithm == "odfa" and p.depth == d])
             for d in (1, 2, 4))
    cross = summary.get("crossover_extrapolated")
    minutes = (time.perf_counter() - t0) / 60
    ok = [
        record_criterion(8, "a", r2 >= 0.95, f"BP width-scan quadratic fit min r^2 {r2:.4f} >= 0.95"),
        record_criterion(8, "b", cv < 0.10, f"ODFA optical-ledger time CV across widths {cv:.3f} < 0.10"),
        record_criterion(8, "c", cross is not None,
                         f"calibrated {summary.get('calibrated_latency', {}).get('seconds_per_projection', float('nan')):.3e}"
                         f" s/projection, extrapolated crossover {cross}"),
        record_criterion(8, "d", minutes <= 30, f"runtime {minutes:.2f} min <= 30"),
    ]
    assert all(ok)


# 9 ---------------------------------------------------------------------------

def _loop_gm(y):
    H, W = len(y), len(y[0])
    return sum(np.sin(np.pi * (i + 1) / H) * y[i][j] for i in range(H) for j in range(W)) / (H * W)


def test_criterion_9_climate_metrics():
    worst, exact = 0.0, True
    rng = np.random.default_rng(9)
    for _ in range(20):
        p, t = rng.normal(1.5, 1.0, (3, 4, 8)), rng.normal(1.5, 1.0, (3, 4, 8))
        gp = [_loop_gm(p[k]) for k in range(3)]
        gt = [_loop_gm(t[k]) for k in range(3)]
        den = abs(sum(gp) / 3)
        dm = p.mean(axis=0) - t.mean(axis=0)
        s = np.sqrt(_loop_gm(dm * dm)) / den
        g = np.sqrt(sum((a - b) ** 2 for a, b in zip(gp, gt)) / 3) / den
        sv, gv = spatial_nrmse(p, t), global_nrmse(p, t)
        worst = max(worst, abs(sv - s) / s, abs(gv - g) / g)
        exact &= total_nrmse(p, t) == sv + 5 * gv
    f = GridField(rng.normal(2.0, 1.0, (3, 4, 8)))
    zeros = spatial_nrmse(f, f) == global_nrmse(f, f) == total_nrmse(f, f) == 0.0
    ok = [
        record_criterion(9, "a", worst <= 1e-12, f"loop oracle max rel err {worst:.1e} <= 1e-12"),
        record_criterion(9, "b", exact, "Total == Spatial + 5 * Global exactly"),
        record_criterion(9, "c", zeros, "identical inputs give zeros"),
    ]
    assert all(ok)


# 10 --------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    train_args = ["train", "--algorithm", "odfa", "--granularity", "per_sample", "--noise", "drift",
                  "--noise-sigma", "0.01", "--n-train", "500", "--n-test", "100", "--epochs", "2", "--seed", "7",
                  "--quiet"]
    bench_args = ["bench", "--depths", "1,2", "--widths", "64,128,256,512", "--samples", "10", "--clock", "model",
                  "--seed", "7", "--quiet"]
    same = True
    for args, files in ((train_args, ("trace.csv", "checkpoint.bin", "metrics.json")),
                        (bench_args, ("points.csv", "summary.json"))):
        outs = []
        for i in range(2):
            d = tmp_path / f"{args[0]}{i}"
            assert cli.main(args + ["--out", str(d)]) == 0
            outs.append([(d / f).read_bytes() for f in files])
        same &= outs[0] == outs[1]
    ok = record_criterion(10, "", same, "repeated train (odfa + drift) and bench (model clock) outputs byte-identical")
    assert ok
