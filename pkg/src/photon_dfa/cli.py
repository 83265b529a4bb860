"""Command-line entry point: ``photon-dfa {train,diagnose,bench,generate,metrics}``.

Each command resolves its configuration as defaults < ``--config`` JSON file
< command-line flags, rejects unknown keys, hashes the result (output
directory excluded) and echoes it to ``<out>/config.json``.

Exit codes: 0 ok, 2 invalid configuration, 3 missing data or corrupt resume
file, 4 numerical failure or a diagnostic outside tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("photon_dfa")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_PROMPT = "JACK: The problem is not the problem."


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


DEFAULTS = {
    "train": {
        "model": "mlp",
        "algorithm": "dfa",
        "dataset": None,  # synthetic for mlp, dialogue for transformer
        "data_dir": None,
        "n_train": 20000,
        "n_test": 2000,
        "dims": [784, 100, 10],
        "activation": "tanh",
        "epochs": 50,
        "batch": None,  # 100 mlp, 32 transformer
        "lr": None,  # 0.01 mlp, 1e-3 transformer
        "momentum": 0.9,
        "optimizer": "sgd_momentum",
        "granularity": "per_batch",
        "threshold": None,
        "noise": "none",
        "noise_sigma": 0.0,
        "val_fraction": None,  # 0.1 mlp, 0.05 transformer
        "feedback_scale": 1.0,
        "corpus": None,
        "corpus_chars": 100000,
        "vocab_file": None,
        "embed_dim": 64,
        "n_blocks": 4,
        "n_heads": 4,
        "mlp_dims": None,  # embed_dim -> 1.5 embed_dim -> embed_dim
        "context": 24,
        "stride": 1,
    },
    "diagnose": {
        "rows": 256,
        "cols": 10,
        "probes": 100,
        "drift_sigma": 0.0,
        "target_pcc": None,
        "steps": 100,
        "stride": 10,
        "tolerance": 1e-9,
        "pcc_tolerance": 0.05,
    },
    "bench": {
        "depths": [1, 2, 4],
        "widths": [128, 256, 512, 768, 1024, 1536],
        "algorithms": ["bp", "odfa"],
        "samples": 60,
        "clock": "wall",
        "realtime": False,
        "seconds_per_projection": 1.0 / 340.0,
        "projections_per_signal": 4,
    },
    "generate": {
        "checkpoint": None,
        "prompt": DEFAULT_PROMPT,
        "n_tokens": 200,
        "temperature": 0.8,
    },
    "metrics": {
        "pred": None,
        "target": None,
        "alpha": 5.0,
    },
}
GLOBAL_KEYS = ("seed", "out")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _flag(p, name, dest=None, **kw):
    p.add_argument(name, dest=dest or name.lstrip("-").replace("-", "_"), default=argparse.SUPPRESS, **kw)


def _globals(p):
    _flag(p, "--config", help="JSON file with configuration keys")
    _flag(p, "--seed", type=int)
    _flag(p, "--out", help="output directory")
    _flag(p, "--quiet", action="store_true", help="only print final results")


def build_parser():
    parser = argparse.ArgumentParser(prog="photon-dfa", description="DFA / TDFA / simulated optical DFA toolkit")
    _globals(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an MLP or a small transformer")
    _globals(p)
    _flag(p, "--model", choices=["mlp", "transformer"])
    _flag(p, "--algorithm", help="bp, dfa, tdfa, odfa or shlw")
    _flag(p, "--dataset", help="synthetic or mnist (mlp); dialogue (transformer)")
    _flag(p, "--data-dir")
    _flag(p, "--n-train", type=int)
    _flag(p, "--n-test", type=int)
    _flag(p, "--dims", type=_int_list, help="e.g. 784,100,10")
    _flag(p, "--activation")
    _flag(p, "--epochs", type=int)
    _flag(p, "--batch", type=int)
    _flag(p, "--lr", type=float)
    _flag(p, "--momentum", type=float)
    _flag(p, "--optimizer")
    _flag(p, "--granularity", help="per_batch or per_sample")
    _flag(p, "--threshold", type=float)
    _flag(p, "--noise", help="none, tm_noise, measurement_noise or drift")
    _flag(p, "--noise-sigma", type=float)
    _flag(p, "--val-fraction", type=float)
    _flag(p, "--feedback-scale", type=float)
    _flag(p, "--corpus", help="text file for transformer training")
    _flag(p, "--corpus-chars", type=int)
    _flag(p, "--vocab-file")
    _flag(p, "--embed-dim", type=int)
    _flag(p, "--n-blocks", type=int)
    _flag(p, "--n-heads", type=int)
    _flag(p, "--mlp-dims", type=_int_list)
    _flag(p, "--context", type=int)
    _flag(p, "--stride", type=int)

    p = sub.add_parser("diagnose", help="linearity, effective matrix, threshold and stability report")
    _globals(p)
    _flag(p, "--rows", type=int)
    _flag(p, "--cols", type=int)
    _flag(p, "--probes", type=int)
    _flag(p, "--drift-sigma", type=float)
    _flag(p, "--target-pcc", type=float, help="calibrate drift sigma to end at this PCC")
    _flag(p, "--steps", type=int)
    _flag(p, "--stride", type=int)
    _flag(p, "--tolerance", type=float)

    p = sub.add_parser("bench", help="training-time scaling scan")
    _globals(p)
    _flag(p, "--depths", type=_int_list)
    _flag(p, "--widths", type=_int_list)
    _flag(p, "--algorithms", type=_str_list)
    _flag(p, "--samples", type=int)
    _flag(p, "--clock", choices=["wall", "model"])
    _flag(p, "--realtime", action="store_true", help="sleep for the simulated optical time")
    _flag(p, "--seconds-per-projection", type=float)

    p = sub.add_parser("generate", help="sample text from a transformer checkpoint")
    _globals(p)
    _flag(p, "--checkpoint")
    _flag(p, "--prompt")
    _flag(p, "--n-tokens", type=int)
    _flag(p, "--temperature", type=float)

    p = sub.add_parser("metrics", help="NRMSE metrics between two grid fields")
    _globals(p)
    _flag(p, "--pred")
    _flag(p, "--target")
    _flag(p, "--alpha", type=float)
    return parser


def resolve_config(command, args: dict):
    """Merge defaults, the optional JSON file and explicit flags."""
    cfg = {"seed": 0, "out": f"runs/{command}", **DEFAULTS[command]}
    allowed = set(cfg)
    path = args.pop("config", None)
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise CliError(EXIT_DATA, f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise CliError(EXIT_CONFIG, f"config file {path} must hold a JSON object")
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config keys for {command!r}: {unknown}")
        cfg.update(raw)
    for k, v in args.items():
        if k in allowed:
            cfg[k] = v
    return cfg


def run_hash(cfg):
    from .training import config_hash

    return config_hash({k: v for k, v in cfg.items() if k != "out"})


def _prepare_out(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(cfg, config_hash=cfg["config_hash"])
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return out


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True, default=float)


# train -------------------------------------------------------------------

def _train_defaults(cfg):
    mlp = cfg["model"] == "mlp"
    fill = {"dataset": "synthetic" if mlp else "dialogue", "batch": 100 if mlp else 32,
            "lr": 0.01 if mlp else 1e-3, "val_fraction": 0.1 if mlp else 0.05}
    for k, v in fill.items():
        if cfg[k] is None:
            cfg[k] = v
    if cfg["mlp_dims"] is None:
        E = cfg["embed_dim"]
        cfg["mlp_dims"] = [E, E + E // 2, E]


def _noise(cfg):
    from .opu import NoiseSpec

    return NoiseSpec(cfg["noise"], float(cfg["noise_sigma"]), int(cfg["seed"]))


def _progress(rec):
    parts = [f"epoch {rec['epoch']:>3} step {rec['step']:>6}"]
    for split in ("val", "test"):
        if f"{split}_loss" in rec:
            parts.append(f"{split} loss {rec[f'{split}_loss']:.4f} acc {rec[f'{split}_accuracy']:.4f}")
    log.info("  ".join(parts))


def cmd_train(cfg):
    from .data import load_dataset

    _train_defaults(cfg)
    cfg["config_hash"] = run_hash(cfg)
    if cfg["model"] == "transformer":
        return _train_transformer(cfg)
    from .checkpoint import save_tensors
    from .mlp import MlpModel
    from .training import TrainConfig, train

    opt = {"kind": cfg["optimizer"], "learning_rate": float(cfg["lr"])}
    if cfg["optimizer"] == "sgd_momentum":
        opt["momentum"] = float(cfg["momentum"])
    tc = TrainConfig(algorithm=cfg["algorithm"], batch_size=int(cfg["batch"]), epochs=int(cfg["epochs"]),
                     optimizer=opt, seed=int(cfg["seed"]), noise=_noise(cfg),
                     projection_granularity=cfg["granularity"], threshold=cfg["threshold"],
                     val_fraction=float(cfg["val_fraction"]), feedback_scale=float(cfg["feedback_scale"]))
    tc.validate()
    dims = [int(d) for d in cfg["dims"]]
    if len(dims) < 2:
        raise CliError(EXIT_CONFIG, "dims needs at least an input and an output width")
    kw = {"n_train": int(cfg["n_train"]), "n_test": int(cfg["n_test"])} if cfg["dataset"] == "synthetic" else {}
    ds = load_dataset(cfg["dataset"], cfg["data_dir"], seed=int(cfg["seed"]), **kw)
    model = MlpModel.init(dims, seed=int(cfg["seed"]), hidden_activation=cfg["activation"])
    out = _prepare_out(cfg)
    trace = train(model, ds, tc, progress=_progress)
    # TrainConfig.hash() covers only the trainer; artifacts carry the run hash.
    trace.config_hash = cfg["config_hash"]
    trace.to_csv(out / "trace.csv", include_wall=False)
    trace.write_timing(out / "trace_timing.csv")
    save_tensors(out / "checkpoint.bin", model.params(),
                 {"kind": "mlp", "layer_dims": dims, "activation": str(model.hidden_activation.value),
                  "config_hash": cfg["config_hash"]})
    final = {k: v for k, v in trace.final().items() if k not in ("wall_seconds", "alignment")}
    final["alignment"] = trace.final()["alignment"]
    final["threshold"] = trace.threshold
    final["config_hash"] = cfg["config_hash"]
    (out / "metrics.json").write_text(_dump(final) + "\n")
    print(_dump(final))
    return EXIT_OK


def _train_transformer(cfg):
    from .data import DataMissingError, dialogue_corpus
    from .transformer import (LMTrainConfig, TransformerConfig, TransformerModel, save_model, tokenize,
                              train_lm)

    if cfg["corpus"] is not None:
        try:
            text = Path(cfg["corpus"]).read_text()
        except FileNotFoundError as exc:
            raise DataMissingError(f"corpus file not found: {cfg['corpus']}") from exc
    elif cfg["dataset"] == "dialogue":
        text = dialogue_corpus(int(cfg["corpus_chars"]), seed=int(cfg["seed"]))
    else:
        raise CliError(EXIT_CONFIG, f"transformer training needs --corpus or dataset 'dialogue', got {cfg['dataset']!r}")
    if cfg["vocab_file"] is not None and not Path(cfg["vocab_file"]).exists():
        raise DataMissingError(f"vocabulary file not found: {cfg['vocab_file']}")
    tokenizer, ids = tokenize(text, cfg["vocab_file"])
    tcfg = TransformerConfig(tokenizer.vocab_size, int(cfg["embed_dim"]), int(cfg["n_blocks"]), int(cfg["n_heads"]),
                             tuple(cfg["mlp_dims"]), int(cfg["context"]))
    lc = LMTrainConfig(mode=cfg["algorithm"], epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]),
                       learning_rate=float(cfg["lr"]), seed=int(cfg["seed"]),
                       projection_granularity=cfg["granularity"], threshold=cfg["threshold"],
                       val_fraction=float(cfg["val_fraction"]), window_stride=int(cfg["stride"]),
                       feedback_scale=float(cfg["feedback_scale"]))
    lc.validate()
    if _noise(cfg).active:
        raise CliError(EXIT_CONFIG, "noise models are only wired into MLP training")
    model = TransformerModel.init(tcfg, seed=int(cfg["seed"]))
    out = _prepare_out(cfg)
    t0 = time.perf_counter()
    trace = train_lm(model, ids, lc, progress=_progress)
    trace.config_hash = cfg["config_hash"]
    trace.epochs[-1]["wall_seconds"] = time.perf_counter() - t0
    trace.to_csv(out / "trace.csv", include_wall=False)
    trace.write_timing(out / "trace_timing.csv")
    save_model(out / "checkpoint.bin", model, tokenizer, {"config_hash": cfg["config_hash"]})
    last = trace.final()
    final = {"epoch": last["epoch"], "step": last["step"], "val_loss": last.get("val_loss"),
             "val_accuracy": last.get("val_accuracy"), "optical_seconds": last["optical_seconds"],
             "n_parameters": model.n_parameters(), "threshold": trace.threshold,
             "config_hash": cfg["config_hash"]}
    (out / "metrics.json").write_text(_dump(final) + "\n")
    print(_dump(final))
    return EXIT_OK


# diagnose ----------------------------------------------------------------

def _rel(a, b):
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def cmd_diagnose(cfg):
    from .opu import NoiseSpec, SessionConfig, calibrate_drift_sigma, stability_trace, threshold_scores

    cfg["config_hash"] = run_hash(cfg)
    seed, rows, cols = int(cfg["seed"]), int(cfg["rows"]), int(cfg["cols"])
    if rows < 1 or cols < 1 or cfg["probes"] < 1 or cfg["steps"] < 0 or cfg["stride"] < 1:
        raise CliError(EXIT_CONFIG, "rows, cols, probes and stride must be positive, steps non-negative")
    base = SessionConfig(rows, cols, tm_seed=seed, anchor_seed=seed + 1).build()
    rng = np.random.default_rng([seed, 0xD1A6])
    out = _prepare_out(cfg)

    add = hom = 0.0
    for _ in range(int(cfg["probes"])):
        a, b = rng.normal(size=cols), rng.normal(size=cols)
        c = float(rng.uniform(-3.0, 3.0))
        sa, sb = base.linear_project(a, validation=True), base.linear_project(b, validation=True)
        add = max(add, _rel(base.linear_project(a + b, validation=True), sa + sb))
        hom = max(hom, _rel(base.linear_project(c * a, validation=True), c * sa))
    zero = float(np.max(np.abs(base.linear_project(np.zeros(cols), validation=True))))
    at_anchor = _rel(base.linear_project(base.anchor.r, validation=True), np.sqrt(base.anchor_intensity))
    linearity = {"additivity_max_rel_err": add, "homogeneity_max_rel_err": hom,
                 "zero_input_max_abs": zero, "anchor_input_max_rel_err": at_anchor}

    T = base.effective_matrix()
    teff = {"shape": list(T.shape), "mean": float(T.mean()), "std": float(T.std()),
            "expected_std": float(np.sqrt(0.5)), "min": float(T.min()), "max": float(T.max())}

    logits = rng.normal(size=cols)
    e0 = np.exp(logits - logits.max())
    e0 /= e0.sum()
    e0[int(rng.integers(cols))] -= 1.0
    scores = threshold_scores(e0, base)
    best = int(np.argmax(scores))
    thresholds = {"selected": best / (len(scores) - 1), "best_score": float(scores[best]),
                  "score_at_zero": float(scores[0]), "scores": [float(s) for s in scores]}

    probe = rng.normal(size=cols)
    sigma = float(cfg["drift_sigma"])
    target = cfg["target_pcc"]
    if target is not None:
        cal = base.clone()
        cal.noise = NoiseSpec("drift", 0.0, seed)
        sigma = calibrate_drift_sigma(cal, probe, int(cfg["steps"]), float(target))
    drift = base.clone()
    drift.noise = NoiseSpec("drift", sigma, seed)
    trace = stability_trace(drift, probe, int(cfg["steps"]), int(cfg["stride"]))
    stability = {"drift_sigma": sigma, "target_pcc": target,
                 "trace": [[int(s), float(p)] for s, p in trace], "final_pcc": float(trace[-1][1])}

    failures = []
    tol = float(cfg["tolerance"])
    for k in ("additivity_max_rel_err", "homogeneity_max_rel_err", "anchor_input_max_rel_err"):
        if linearity[k] > tol:
            failures.append(f"{k} = {linearity[k]:.3e} exceeds {tol:.1e}")
    if zero != 0.0:
        failures.append(f"zero input projects to {zero:.3e}, not 0")
    if target is not None and abs(stability["final_pcc"] - target) > float(cfg["pcc_tolerance"]):
        failures.append(f"final PCC {stability['final_pcc']:.4f} misses target {target}")
    report = {"config_hash": cfg["config_hash"], "linearity": linearity, "effective_matrix": teff,
              "threshold": thresholds, "stability": stability, "failures": failures}
    (out / "diagnostics.json").write_text(_dump(report) + "\n")
    summary = {k: report[k] for k in ("linearity", "effective_matrix", "failures")}
    summary["threshold"] = {k: thresholds[k] for k in ("selected", "best_score")}
    summary["final_pcc"] = stability["final_pcc"]
    summary["drift_sigma"] = sigma
    print(_dump(summary))
    if failures:
        for f in failures:
            log.error("diagnostic failed: %s", f)
        return EXIT_NUMERIC
    return EXIT_OK


# bench -------------------------------------------------------------------

def cmd_bench(cfg):
    from .bench import ALGORITHMS, CLOCKS, scan_widths, summarize, write_summary
    from .opu import LatencyModel

    cfg["config_hash"] = run_hash(cfg)
    bad = set(cfg["algorithms"]) - set(ALGORITHMS)
    if bad or cfg["clock"] not in CLOCKS or int(cfg["samples"]) < 1:
        raise CliError(EXIT_CONFIG, f"bench needs algorithms in {ALGORITHMS}, clock in {CLOCKS}, samples >= 1")
    if min(cfg["depths"], default=0) < 1 or min(cfg["widths"], default=0) < 1:
        raise CliError(EXIT_CONFIG, "depths and widths must be non-empty positive integers")
    latency = LatencyModel(float(cfg["seconds_per_projection"]), int(cfg["projections_per_signal"]))
    out = _prepare_out(cfg)

    def progress(p):
        log.info("%-4s depth %3d width %5d  %.6f s/sample", p.algorithm, p.depth, p.width, p.seconds_per_sample)
        if cfg["realtime"] and p.algorithm == "odfa":
            time.sleep(p.optical * int(cfg["samples"]))

    points = scan_widths(cfg["depths"], cfg["widths"], cfg["algorithms"], latency, int(cfg["samples"]),
                         out / "points.csv", cfg["clock"], int(cfg["seed"]), progress,
                         config_hash=cfg["config_hash"])
    summary = summarize(points, latency)
    summary["config_hash"] = cfg["config_hash"]
    summary["clock"] = cfg["clock"]
    write_summary(out / "summary.json", summary)
    keys = [k for k in ("crossover_measured", "crossover_measured_calibrated", "crossover_extrapolated",
                        "calibrated_latency", "star_point") if k in summary]
    print(_dump({"points": len(points), **{k: summary[k] for k in keys}}))
    return EXIT_OK


# generate ----------------------------------------------------------------

def cmd_generate(cfg):
    from .transformer import generate, load_model

    cfg["config_hash"] = run_hash(cfg)
    ckpt = cfg["checkpoint"]
    if ckpt is None:
        raise CliError(EXIT_CONFIG, "generate needs --checkpoint")
    if not Path(ckpt).exists():
        raise CliError(EXIT_DATA, f"checkpoint not found: {ckpt}")
    if int(cfg["n_tokens"]) < 0:
        raise CliError(EXIT_CONFIG, "n_tokens must be non-negative")
    model, tokenizer = load_model(ckpt)
    if tokenizer is None:
        raise CliError(EXIT_DATA, f"{ckpt} carries no tokenizer manifest")
    text = generate(model, tokenizer, cfg["prompt"], int(cfg["n_tokens"]), float(cfg["temperature"]),
                    int(cfg["seed"]))
    sys.stdout.write(text + "\n")
    return EXIT_OK


# metrics -----------------------------------------------------------------

def cmd_metrics(cfg):
    from .metrics import GridField, all_metrics

    cfg["config_hash"] = run_hash(cfg)
    if cfg["pred"] is None or cfg["target"] is None:
        raise CliError(EXIT_CONFIG, "metrics needs --pred and --target")
    fields = []
    for key in ("pred", "target"):
        try:
            fields.append(GridField.load(cfg[key]))
        except FileNotFoundError as exc:
            raise CliError(EXIT_DATA, f"{key} file not found: {exc.filename}") from exc
    if fields[0].shape != fields[1].shape:
        raise CliError(EXIT_CONFIG, f"shape mismatch: {fields[0].shape} vs {fields[1].shape}")
    res = all_metrics(fields[0], fields[1], float(cfg["alpha"]))
    res["config_hash"] = cfg["config_hash"]
    print(_dump(res))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "diagnose": cmd_diagnose, "bench": cmd_bench,
            "generate": cmd_generate, "metrics": cmd_metrics}


def _classify(exc):
    from .bench import CapacityError, ResumeError
    from .checkpoint import CheckpointError
    from .data import DataMissingError
    from .training import NumericalFailure

    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ResumeError, DataMissingError, CheckpointError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, (NumericalFailure, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ValueError, TypeError, KeyError, CapacityError)):
        return EXIT_CONFIG
    return None


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    quiet = args.pop("quiet", False)
    logging.basicConfig(level=logging.WARNING if quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(command, args)
        return COMMANDS[command](cfg)
    except Exception as exc:  # noqa: BLE001 - mapped onto the exit-code table
        code = _classify(exc)
        if code is None:
            raise
        log.error("error: %s", exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
