"""Command-line entry points: train, baseline, eval, report, sweep.

Every run writes one directory: metrics.csv (tidy per-metric rows),
adapt.jsonl (one add/remove event per line), config.snapshot (the
normalized configuration) and checkpoint.final (the model). ``report``
aggregates any number of such directories into figure-ready CSV/JSON files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunSpec, load_config
from .harness import (
    RunResult,
    evaluate,
    gen_task,
    load_model,
    run_baseline,
    save_model,
    train_loop,
)
from .telemetry import MetricsLog

log = logging.getLogger("dynmoe")

ADAPT_JSONL_SCHEMA = "dynmoe-adapt/1"
ARTIFACTS_SCHEMA = "dynmoe-artifacts/1"
REPORT_SCHEMA = "dynmoe-report/1"


def _configure_logging() -> None:
    level = os.environ.get("DYNMOE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def write_run_dir(outdir: Path, spec_doc: dict, result: RunResult) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    result.metrics.to_csv(outdir / "metrics.csv")
    with (outdir / "adapt.jsonl").open("w") as fh:
        for event in result.adapt_events:
            fh.write(json.dumps({"schema": ADAPT_JSONL_SCHEMA, **event}, sort_keys=True) + "\n")
    (outdir / "config.snapshot").write_text(json.dumps(spec_doc, sort_keys=True, indent=2))
    save_model(result.model, outdir / "checkpoint.final")
    artifacts = {
        "schema": ARTIFACTS_SCHEMA,
        "final_accuracy": result.final_accuracy,
        "mean_k": result.mean_k,
        "activated_params": result.activated_params,
        "k_trajectory": [[step, list(counts)] for step, counts in result.k_trajectory],
        "similarity": result.similarity,
    }
    (outdir / "artifacts.json").write_text(json.dumps(artifacts, sort_keys=True, indent=2))


def checkpoint_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _apply_overrides(spec: RunSpec, args) -> RunSpec:
    train = spec.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "aux_weight", None) is not None:
        train = replace(train, aux_loss_weight=args.aux_weight)
    if getattr(args, "combine", None) is not None:
        train = replace(train, combine=args.combine)
    adapt = train.adapt
    if adapt is not None:
        if getattr(args, "max_experts", None) is not None:
            adapt = replace(adapt, max_experts=args.max_experts)
        if getattr(args, "check_interval", None) is not None:
            adapt = replace(adapt, check_interval=args.check_interval)
        if getattr(args, "init_strategy", None) is not None:
            adapt = replace(adapt, init_strategy=args.init_strategy)
        train = replace(train, adapt=adapt)
    router_kind = spec.router_kind
    if getattr(args, "router", None) is not None:
        router_kind = args.router
    spec = replace(spec, train=train, router_kind=router_kind)
    spec.source["train"]["seed"] = spec.train.seed
    spec.source["train"]["aux_loss_weight"] = spec.train.aux_loss_weight
    spec.source["train"]["combine"] = spec.train.combine
    if spec.train.adapt is not None and spec.source.get("adapt"):
        spec.source["adapt"]["max_experts"] = spec.train.adapt.max_experts
        spec.source["adapt"]["check_interval"] = spec.train.adapt.check_interval
        spec.source["adapt"]["init_strategy"] = spec.train.adapt.init_strategy
    spec.source["router"]["kind"] = router_kind
    return spec


def cmd_train(args) -> int:
    spec = _apply_overrides(load_config(args.config), args)
    task = gen_task(spec.task.n_skills, spec.task.d, spec.task.n_samples, spec.task.seed)
    if spec.router_kind == "topk":
        if spec.baseline_experts is None or spec.baseline_top_k is None:
            raise ConfigError("training a top-k router needs router.n_experts and router.top_k")
        result = run_baseline(task, spec.train, spec.baseline_experts, spec.baseline_top_k)
    else:
        result = train_loop(task, spec.train)
    outdir = Path(args.out or "runs/train")
    write_run_dir(outdir, spec.source, result)
    print(f"final_accuracy={result.final_accuracy:.4f} mean_k={result.mean_k:.3f} "
          f"n_experts={sum(result.k_trajectory[-1][1])}")
    print(f"checkpoint_sha256={checkpoint_hash(outdir / 'checkpoint.final')}")
    print(f"run_dir={outdir}")
    return 0


def cmd_baseline(args) -> int:
    spec = _apply_overrides(load_config(args.config), args)
    task = gen_task(spec.task.n_skills, spec.task.d, spec.task.n_samples, spec.task.seed)
    result = run_baseline(task, spec.train, args.K, args.k)
    outdir = Path(args.out or f"runs/baseline_K{args.K}_k{args.k}")
    spec.source["router"] = {"kind": "topk", "n_experts": args.K, "top_k": args.k}
    write_run_dir(outdir, spec.source, result)
    print(f"final_accuracy={result.final_accuracy:.4f} K={args.K} k={args.k}")
    print(f"run_dir={outdir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        print(f"error: checkpoint not found: {ckpt}", file=sys.stderr)
        return 2
    taskfile = Path(args.task)
    if not taskfile.is_file():
        print(f"error: task file not found: {taskfile}", file=sys.stderr)
        return 2
    try:
        doc = json.loads(taskfile.read_text())
    except json.JSONDecodeError as exc:
        print(f"error: {taskfile}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    task_sec = doc.get("task", doc)
    try:
        task = gen_task(int(task_sec["n_skills"]), int(task_sec["d"]),
                        int(task_sec["n_samples"]), int(task_sec["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid task spec in {taskfile}: {exc}", file=sys.stderr)
        return 2

    model = load_model(ckpt)
    accuracy, stats, _ = evaluate(model, task.tokens, task.labels)
    metrics = MetricsLog()
    from .harness import _log_eval  # same rows the training loop emits

    _log_eval(metrics, 0, model, accuracy, stats)
    outdir = Path(args.out or "runs/eval")
    outdir.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(outdir / "metrics.csv")
    from .harness import _similarity_snapshot

    artifacts = {
        "schema": ARTIFACTS_SCHEMA,
        "final_accuracy": accuracy,
        "mean_k": float(np.mean([ps.mean_top_k for ps in stats])),
        "similarity": _similarity_snapshot(model),
        "k_trajectory": [],
    }
    (outdir / "artifacts.json").write_text(json.dumps(artifacts, sort_keys=True, indent=2))
    for ps in stats:
        # emission-time identities over exact integer counters
        assert int(ps.hist.sum()) == ps.n_tokens
        assert int(ps.counts.sum()) == ps.k_total
    print(f"accuracy={accuracy:.4f} mean_k={np.mean([ps.mean_top_k for ps in stats]):.3f}")
    print(f"metrics={outdir / 'metrics.csv'}")
    return 0


def _write_report_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        fh.write(f"# schema={REPORT_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_report(args) -> int:
    logdir = Path(args.logdir)
    run_dirs = []
    if (logdir / "metrics.csv").is_file():
        run_dirs.append(logdir)
    if logdir.is_dir():
        run_dirs.extend(sorted(p.parent for p in logdir.glob("*/metrics.csv")))
    if not run_dirs:
        print("error: no metrics found", file=sys.stderr)
        return 1

    by_metric: dict[str, list[list]] = {
        "avg_top_k": [], "activation_frequency": [], "gate_thresholds": [],
        "eval_accuracy": [], "n_experts": [],
    }
    k_trajectories = {}
    similarity = {}
    for run in run_dirs:
        name = run.name
        metrics = MetricsLog.read_csv(run / "metrics.csv")
        for row in metrics.rows:
            if row.metric in ("avg_top_k", "eval_accuracy", "n_experts"):
                by_metric[row.metric].append([name, row.step, row.layer, repr(row.values[0])])
            elif row.metric in ("activation_frequency", "gate_thresholds"):
                for idx, value in enumerate(row.values):
                    by_metric[row.metric].append([name, row.step, row.layer, idx, repr(value)])
        artifacts_path = run / "artifacts.json"
        if artifacts_path.is_file():
            artifacts = json.loads(artifacts_path.read_text())
            k_trajectories[name] = artifacts.get("k_trajectory", [])
            similarity[name] = artifacts.get("similarity", [])

    outdir = logdir / "report"
    outdir.mkdir(parents=True, exist_ok=True)
    _write_report_csv(outdir / "avg_top_k_per_layer.csv",
                      ["run", "step", "layer", "avg_top_k"], by_metric["avg_top_k"])
    _write_report_csv(outdir / "activation_frequency_per_layer.csv",
                      ["run", "step", "layer", "expert", "frequency"],
                      by_metric["activation_frequency"])
    _write_report_csv(outdir / "gate_thresholds.csv",
                      ["run", "step", "layer", "expert", "threshold"],
                      by_metric["gate_thresholds"])
    _write_report_csv(outdir / "eval_accuracy.csv",
                      ["run", "step", "layer", "accuracy"], by_metric["eval_accuracy"])
    _write_report_csv(outdir / "n_experts.csv",
                      ["run", "step", "layer", "n_experts"], by_metric["n_experts"])
    rows = []
    for name, traj in sorted(k_trajectories.items()):
        for step, counts in traj:
            for layer, count in enumerate(counts):
                rows.append([name, step, layer, count])
    _write_report_csv(outdir / "k_trajectory.csv", ["run", "step", "layer", "n_experts"], rows)
    (outdir / "similarity.json").write_text(
        json.dumps({"schema": REPORT_SCHEMA, "runs": similarity}, sort_keys=True, indent=2)
    )
    print(f"report written to {outdir} ({len(run_dirs)} run(s))")
    return 0


def cmd_sweep(args) -> int:
    spec = _apply_overrides(load_config(args.config), args)
    task = gen_task(spec.task.n_skills, spec.task.d, spec.task.n_samples, spec.task.seed)
    outdir = Path(args.out or "runs/sweep")
    outdir.mkdir(parents=True, exist_ok=True)

    rows = []
    for n_experts in spec.sweep_experts:
        for top_k in spec.sweep_top_k:
            result = run_baseline(task, spec.train, n_experts, top_k)
            rows.append(["topk", n_experts, top_k, repr(result.mean_k),
                         repr(result.final_accuracy), repr(result.activated_params)])
            log.info("baseline K=%d k=%d accuracy=%.4f", n_experts, top_k, result.final_accuracy)
    dyn = train_loop(task, spec.train)
    rows.append(["dynmoe", sum(dyn.k_trajectory[-1][1]), "", repr(dyn.mean_k),
                 repr(dyn.final_accuracy), repr(dyn.activated_params)])
    write_run_dir(outdir / "dynmoe", spec.source, dyn)

    _write_report_csv(outdir / "comparison.csv",
                      ["router", "n_experts", "top_k", "mean_k", "final_accuracy",
                       "activated_params"], rows)
    print(f"sweep rows={len(rows)} written to {outdir / 'comparison.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynmoe",
        description="Train and analyze threshold-gated mixture-of-experts models "
                    "on planted-skill tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)

    def add_config_arg(p):
        # accepted positionally or as --config; exactly one must be given
        p.add_argument("config", nargs="?", default=None)
        p.add_argument("--config", dest="config_flag", default=None)

    p_train = sub.add_parser("train", help="train a model from a config file")
    add_config_arg(p_train)
    add_common(p_train)
    p_train.add_argument("--max-experts", type=int, default=None, dest="max_experts")
    p_train.add_argument("--check-interval", type=int, default=None, dest="check_interval")
    p_train.add_argument("--init-strategy", default=None, dest="init_strategy",
                         choices=["paper_rs", "average", "w_average", "most_activated"])
    p_train.add_argument("--aux-weight", type=float, default=None, dest="aux_weight")
    p_train.add_argument("--combine", choices=["mean", "weighted"], default=None)
    p_train.add_argument("--router", choices=["dynmoe", "topk"], default=None)
    p_train.set_defaults(handler=cmd_train)

    p_base = sub.add_parser("baseline", help="train a fixed top-k baseline")
    add_config_arg(p_base)
    p_base.add_argument("--K", type=int, required=True)
    p_base.add_argument("--k", type=int, required=True)
    add_common(p_base)
    p_base.set_defaults(handler=cmd_baseline)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a task spec")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("task")
    p_eval.add_argument("--out", type=str, default=None)
    p_eval.set_defaults(handler=cmd_eval)

    p_report = sub.add_parser("report", help="aggregate run logs into figure-ready tables")
    p_report.add_argument("logdir")
    p_report.set_defaults(handler=cmd_report)

    p_sweep = sub.add_parser("sweep", help="baseline (K, k) grid plus one adaptive run")
    add_config_arg(p_sweep)
    add_common(p_sweep)
    p_sweep.set_defaults(handler=cmd_sweep)

    return parser


def _resolve_config_path(args, parser) -> None:
    if not hasattr(args, "config_flag"):
        return
    given = [v for v in (args.config, args.config_flag) if v is not None]
    if len(given) != 1:
        parser.error(f"{args.command}: give a config file either positionally or via --config")
    args.config = given[0]


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _resolve_config_path(args, parser)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
