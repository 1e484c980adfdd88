"""Command-line entry point: ``s2o <subcommand> [--config F] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import traceback
from pathlib import Path

import numpy as np

import s2o
from s2o import kernels
from s2o.config import ExperimentConfig, load_config

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "clean_acc", "robust_acc", "s2o_penalty_value",
                  "sum_rprime_norm", "sum_logdet_r", "checkpoint")


class CliError(RuntimeError):
    pass


def conventions(cfg: ExperimentConfig | None = None) -> dict:
    return {
        "vec_order": "row-major (W[i,k] at i*cols+k)",
        "kronecker_order": "curvature kron activation (row-major vec)",
        "sigma_convention": cfg.bound["sigma_convention"] if cfg else "uniform",
        "c1": 1.0, "c2": 1.0,
        "s2o_penalty_scale": cfg.train.s2o_scale if cfg else "mean",
    }


def write_metadata(path: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> Path:
    meta = {
        "command": command, "config_hash": cfg.config_hash(), "config_file": cfg.source,
        "seed": cfg.seed, "package_version": s2o.__version__, "kernel_backend": kernels.BACKEND,
        "conventions": conventions(cfg), "config": cfg.to_dict(), **(extra or {}),
    }
    meta_path = Path(str(path) + ".meta.json")
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return meta_path


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: Path, history: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [c for c in METRIC_COLUMNS if any(c in row for row in history)] or list(METRIC_COLUMNS)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in history:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])
    return path


def load_data(cfg: ExperimentConfig):
    from s2o.data import load_idx_dataset, synthesize_blobs
    d = cfg.dataset
    if d["kind"] == "idx":
        train = load_idx_dataset(d["image_path"], d["label_path"], d.get("limit"))
        if d.get("test_image_path"):
            test = load_idx_dataset(d["test_image_path"], d["test_label_path"], d.get("test_limit"))
        else:
            cut = int(round(0.8 * len(train)))
            train, test = train.subset(slice(0, cut)), train.subset(slice(cut, None))
        return train, test
    return synthesize_blobs(d["classes"], d["dim"], d["per_class"], d["spread"], cfg.seed)


def _checkpoint(cfg: ExperimentConfig, args) -> Path:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(cfg.out) / "checkpoints" / "final.s2ow"
    if not path.exists():
        raise CliError(f"checkpoint {path} not found; run `s2o train` first or pass --checkpoint")
    return path


# ---------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, args) -> dict:
    from s2o.model import save_checkpoint
    from s2o.training import run_training
    train, test = load_data(cfg)
    out = Path(cfg.out)
    dims = [train.inputs.shape[1], *cfg.hidden, int(max(train.labels.max(), test.labels.max())) + 1]
    pgd_eval = cfg.eval_attacks.get("pgd20") or next(iter(cfg.eval_attacks.values()))
    start = time.perf_counter()
    result = run_training(cfg.train, train, test, dims=dims, activation=cfg.activation,
                          eval_attack=pgd_eval, out_dir=out / "checkpoints",
                          checkpoint_every=cfg.checkpoint_every, diagnostics=cfg.diagnostics)
    elapsed = time.perf_counter() - start
    final = save_checkpoint(result.net, out / "checkpoints" / "final.s2ow",
                            {"seed": cfg.seed, "config_hash": cfg.config_hash(), "aborted": result.aborted})
    metrics = write_metrics_csv(out / "metrics.csv", result.history)
    write_metadata(metrics, cfg, "train", {"aborted": result.aborted, "error": result.error})
    # wall-clock lives apart from metrics.csv so that file stays bitwise reproducible
    (out / "timings.json").write_text(json.dumps({"wall_time": elapsed}, indent=2))
    return {"metrics": str(metrics), "checkpoint": str(final), "aborted": result.aborted,
            "error": result.error, "final": result.history[-1] if result.history else None}


def cmd_attack_eval(cfg: ExperimentConfig, args) -> dict:
    from s2o.attacks import robust_accuracy
    from s2o.model import accuracy, load_checkpoint
    net, _ = load_checkpoint(_checkpoint(cfg, args))
    _, test = load_data(cfg)
    res = {"clean": accuracy(net, test)}
    for name, attack in cfg.eval_attacks.items():
        res[name] = robust_accuracy(net, test, attack, seed=cfg.seed)
    path = Path(cfg.out) / "attack_eval.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(res, indent=2, sort_keys=True))
    write_metadata(path, cfg, "attack-eval")
    return res


def _estimate_paths(cfg: ExperimentConfig, estimator: str) -> tuple[Path, Path]:
    base = Path(cfg.out) / "estimates"
    return base / f"{estimator}_clean", base / f"{estimator}_adversarial"


def cmd_estimate(cfg: ExperimentConfig, args) -> dict:
    from s2o.model import load_checkpoint
    from s2o.statistics import (attacked_dataset, correlation_from_samples, laplace_estimate,
                                sample_posterior_weights)
    net, _ = load_checkpoint(_checkpoint(cfg, args))
    train, _ = load_data(cfg)
    pgd = cfg.train.attack
    adv = attacked_dataset(net, train, pgd, cfg.seed)
    which = cfg.estimate["estimator"]
    written = {}
    for domain, data in (("clean", train), ("adversarial", adv)):
        if which in ("both", "laplace"):
            est = laplace_estimate(net, data)
            stem = _estimate_paths(cfg, "laplace")[domain == "adversarial"]
            written[f"laplace_{domain}"] = str(est.save(stem))
            write_metadata(stem, cfg, "estimate")
        if which in ("both", "sampling"):
            e = cfg.estimate
            samples = sample_posterior_weights(net, data, e["noise_std"], e["epochs"], e["lr"], e["eps_prime"],
                                               cfg.seed, e["batch_size"], e["min_samples"])
            est = correlation_from_samples(samples, e["min_samples"])
            stem = _estimate_paths(cfg, "sampling")[domain == "adversarial"]
            written[f"sampling_{domain}"] = str(est.save(stem))
            write_metadata(stem, cfg, "estimate")
    return written


def cmd_bound(cfg: ExperimentConfig, args) -> dict:
    from s2o.bounds import BoundInputs, corollary_bound, estimate_kappa_and_norm
    from s2o.model import load_checkpoint
    from s2o.statistics import CorrelationEstimate, attacked_dataset, laplace_estimate
    net, _ = load_checkpoint(_checkpoint(cfg, args))
    train, _ = load_data(cfg)
    b = cfg.bound
    clean_stem, adv_stem = _estimate_paths(cfg, b["estimator"])
    if clean_stem.with_suffix(".json").exists() and adv_stem.with_suffix(".json").exists():
        clean, adv = CorrelationEstimate.load(clean_stem), CorrelationEstimate.load(adv_stem)
    elif b["estimator"] == "laplace":
        clean = laplace_estimate(net, train)
        adv = laplace_estimate(net, attacked_dataset(net, train, cfg.train.attack, cfg.seed))
    else:
        raise CliError(f"no {b['estimator']} estimates under {clean_stem.parent}; run `s2o estimate` first")
    attack = cfg.train.attack
    kappa, input_norm, degenerate = estimate_kappa_and_norm(net, train, attack, cfg.seed)
    # l_inf budgets enter the l_2-based capacity term through the enclosing l_2 ball
    scale = math.sqrt(train.inputs.shape[1]) if attack.norm == "linf" else 1.0
    inputs = BoundInputs.from_network(
        net, num_samples=len(train), input_norm=input_norm, epsilon=attack.epsilon * scale, kappa=kappa, gamma=b["gamma"],
        delta=b["delta"], sigma=b["sigma"], sigma_convention=b["sigma_convention"],
        attack_model=b["attack_model"], pgm_iterations=attack.iterations,
        pgm_step=attack.step_size * scale)
    report = corollary_bound(inputs, clean, adv)
    report.metadata.update({"kappa_floored": degenerate, "epsilon_l2": inputs.epsilon,
                            "attack_norm": attack.norm})
    path = report.save(Path(cfg.out) / "bound_report.json")
    write_metadata(path, cfg, "bound")
    return {"report": str(path), "complexity": report.complexity, "all_finite": report.all_finite()}


def cmd_simulate(cfg: ExperimentConfig, args) -> dict:
    from s2o.simulation import SimConfig, lemma_trend_check, scatter_experiment
    out = Path(cfg.out) / f"scatter_dim{args.dim}.csv"
    summary = scatter_experiment(SimConfig(args.dim, args.count, args.generator, cfg.seed, str(out)))
    summary.pop("rows")
    write_metadata(out, cfg, "simulate", {"sim": summary["config"]})
    h = math.isqrt(args.dim)
    # negative correlations are only valid above -1/(h^2 - 1)
    negative = [r for r in (0.0, -0.05, -0.1) if r > -1.0 / (h * h - 1)]
    trends = [lemma_trend_check(h, [r / 10 for r in range(10)]), lemma_trend_check(h, negative)]
    (Path(cfg.out) / f"trend_check_h{h}.json").write_text(json.dumps(trends, indent=2))
    return {"csv": str(out), "spearman": summary["spearman"], "trend_checks_pass": all(t["passed"] for t in trends)}


def cmd_gradcheck(cfg: ExperimentConfig, args) -> dict:
    from s2o.gradcheck import run_suite
    results = run_suite(args.cases, seed=cfg.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    payload = {"passed": ok, "checks": [{"name": r.name, "cases": r.cases, "max_rel_error": r.max_rel_error,
                                         "passed": r.passed} for r in results]}
    path = Path(cfg.out) / "gradcheck.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    write_metadata(path, cfg, "gradcheck")
    if not ok:
        raise CliError("gradient check failed: " + ", ".join(r.name for r in results if not r.passed))
    return {"passed": ok, "report": str(path)}


COMMANDS = {"train": cmd_train, "attack-eval": cmd_attack_eval, "estimate": cmd_estimate,
            "bound": cmd_bound, "simulate": cmd_simulate, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    parser = argparse.ArgumentParser(prog="s2o", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="adversarial training run")
    for name in ("attack-eval", "estimate", "bound"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="weights file (default <out>/checkpoints/final.s2ow)")
    p = sub.add_parser("simulate", parents=[common], help="random correlation matrix scatter")
    p.add_argument("--dim", type=int, default=9)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--generator", default="wishart", choices=("wishart", "equicorrelated", "identity"))
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    p.add_argument("--cases", type=int, default=100, help="random cases per primitive")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # surfaced as machine-readable JSON
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
               "trace": traceback.format_exception_only(type(exc), exc)[-1].strip()}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
