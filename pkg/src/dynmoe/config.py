"""Run configuration files: a versioned JSON document mapped onto the
harness dataclasses, with errors that point at the offending place."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .adaptive import AdaptConfig
from .harness import OptimizerConfig, TrainConfig
from .numerics import ConfigurationError

CONFIG_SCHEMA = "dynmoe-config/1"


class ConfigError(Exception):
    """Unreadable or invalid run configuration."""


@dataclass
class TaskSpec:
    n_skills: int = 4
    d: int = 16
    n_samples: int = 8000
    seed: int = 7

    def to_dict(self) -> dict:
        return {"n_skills": self.n_skills, "d": self.d,
                "n_samples": self.n_samples, "seed": self.seed}


@dataclass
class RunSpec:
    task: TaskSpec
    train: TrainConfig
    router_kind: str = "dynmoe"          # "dynmoe" or "topk"
    baseline_experts: int | None = None  # for router_kind == "topk"
    baseline_top_k: int | None = None
    sweep_experts: tuple[int, ...] = (2, 4, 8)
    sweep_top_k: tuple[int, ...] = (1, 2)
    source: dict = field(default_factory=dict)  # raw document for snapshots


def _take(section: dict, key: str, default, where: str):
    value = section.pop(key, default)
    if value is None and default is not None:
        raise ConfigError(f"{where}.{key} must not be null")
    return value


def _reject_unknown(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(section)}")


def parse_config_doc(doc: dict, origin: str = "<config>") -> RunSpec:
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: top level must be an object")
    doc = dict(doc)
    schema = doc.pop("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"{origin}: unsupported schema {schema!r}, expected {CONFIG_SCHEMA!r}")

    try:
        task_sec = dict(doc.pop("task", {}))
        task = TaskSpec(
            n_skills=int(_take(task_sec, "n_skills", 4, "task")),
            d=int(_take(task_sec, "d", 16, "task")),
            n_samples=int(_take(task_sec, "n_samples", 8000, "task")),
            seed=int(_take(task_sec, "seed", 7, "task")),
        )
        _reject_unknown(task_sec, "task")

        adapt_sec = doc.pop("adapt", {})
        if adapt_sec is None:
            adapt = None
        else:
            adapt_sec = dict(adapt_sec)
            window = _take(adapt_sec, "record_window", [1.0 / 3.0, 2.0 / 3.0], "adapt")
            adapt = AdaptConfig(
                max_experts=int(_take(adapt_sec, "max_experts", 16, "adapt")),
                check_interval=int(_take(adapt_sec, "check_interval", 100, "adapt")),
                record_window=(float(window[0]), float(window[1])),
                init_strategy=str(_take(adapt_sec, "init_strategy", "paper_rs", "adapt")),
                min_experts=int(_take(adapt_sec, "min_experts", 1, "adapt")),
            )
            _reject_unknown(adapt_sec, "adapt")

        train_sec = dict(doc.pop("train", {}))
        opt_sec = dict(_take(train_sec, "optimizer", {}, "train") or {})
        optimizer = OptimizerConfig(
            kind=str(_take(opt_sec, "kind", "adam", "train.optimizer")),
            beta1=float(_take(opt_sec, "beta1", 0.9, "train.optimizer")),
            beta2=float(_take(opt_sec, "beta2", 0.999, "train.optimizer")),
            eps=float(_take(opt_sec, "eps", 1e-8, "train.optimizer")),
        )
        _reject_unknown(opt_sec, "train.optimizer")

        plugins_raw = doc.pop("plugins", [])
        plugins = tuple(
            (str(p["name"]), float(p.get("weight", 1.0))) for p in plugins_raw
        )

        train = TrainConfig(
            steps=int(_take(train_sec, "steps", 3000, "train")),
            batch_size=int(_take(train_sec, "batch_size", 32, "train")),
            learning_rate=float(_take(train_sec, "learning_rate", 0.02, "train")),
            optimizer=optimizer,
            aux_loss_weight=float(_take(train_sec, "aux_loss_weight", 1.0, "train")),
            adapt=adapt,
            seed=int(_take(train_sec, "seed", 0, "train")),
            eval_every=int(_take(train_sec, "eval_every", 500, "train")),
            n_layers=int(_take(train_sec, "n_layers", 1, "train")),
            hidden=int(_take(train_sec, "hidden", 16, "train")),
            init_experts=int(_take(train_sec, "init_experts", 2, "train")),
            n_classes=int(_take(train_sec, "n_classes", 2, "train")),
            combine=str(_take(train_sec, "combine", "mean", "train")),
            detach_router_tokens=bool(_take(train_sec, "detach_router_tokens", False, "train")),
            plugins=plugins,
            eval_fraction=float(_take(train_sec, "eval_fraction", 0.2, "train")),
        )
        _reject_unknown(train_sec, "train")

        router_sec = dict(doc.pop("router", {"kind": "dynmoe"}))
        kind = str(_take(router_sec, "kind", "dynmoe", "router"))
        if kind not in ("dynmoe", "topk"):
            raise ConfigError(f"router.kind must be 'dynmoe' or 'topk', got {kind!r}")
        baseline_experts = router_sec.pop("n_experts", None)
        baseline_top_k = router_sec.pop("top_k", None)
        _reject_unknown(router_sec, "router")
        if kind == "topk" and (baseline_experts is None or baseline_top_k is None):
            raise ConfigError("router.kind 'topk' requires router.n_experts and router.top_k")

        sweep_sec = dict(doc.pop("sweep", {}))
        sweep_experts = tuple(int(v) for v in _take(sweep_sec, "n_experts_grid", [2, 4, 8], "sweep"))
        sweep_top_k = tuple(int(v) for v in _take(sweep_sec, "top_k_grid", [1, 2], "sweep"))
        _reject_unknown(sweep_sec, "sweep")
        _reject_unknown(doc, origin)
    except ConfigError:
        raise
    except ConfigurationError as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"{origin}: malformed value ({exc})") from exc

    return RunSpec(
        task=task,
        train=train,
        router_kind=kind,
        baseline_experts=None if baseline_experts is None else int(baseline_experts),
        baseline_top_k=None if baseline_top_k is None else int(baseline_top_k),
        sweep_experts=sweep_experts,
        sweep_top_k=sweep_top_k,
        source=_spec_doc(task, train, kind, baseline_experts, baseline_top_k,
                         sweep_experts, sweep_top_k),
    )


def _spec_doc(task, train, kind, baseline_experts, baseline_top_k, sweep_experts, sweep_top_k) -> dict:
    adapt = train.adapt
    return {
        "schema": CONFIG_SCHEMA,
        "task": task.to_dict(),
        "train": {
            "steps": train.steps,
            "batch_size": train.batch_size,
            "learning_rate": train.learning_rate,
            "optimizer": {
                "kind": train.optimizer.kind,
                "beta1": train.optimizer.beta1,
                "beta2": train.optimizer.beta2,
                "eps": train.optimizer.eps,
            },
            "aux_loss_weight": train.aux_loss_weight,
            "seed": train.seed,
            "eval_every": train.eval_every,
            "n_layers": train.n_layers,
            "hidden": train.hidden,
            "init_experts": train.init_experts,
            "n_classes": train.n_classes,
            "combine": train.combine,
            "detach_router_tokens": train.detach_router_tokens,
            "eval_fraction": train.eval_fraction,
        },
        "adapt": None if adapt is None else {
            "max_experts": adapt.max_experts,
            "check_interval": adapt.check_interval,
            "record_window": list(adapt.record_window),
            "init_strategy": adapt.init_strategy,
            "min_experts": adapt.min_experts,
        },
        "router": {"kind": kind, "n_experts": baseline_experts, "top_k": baseline_top_k},
        "plugins": [{"name": n, "weight": w} for n, w in train.plugins],
        "sweep": {"n_experts_grid": list(sweep_experts), "top_k_grid": list(sweep_top_k)},
    }


def load_config(path) -> RunSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config_doc(doc, origin=str(path))
