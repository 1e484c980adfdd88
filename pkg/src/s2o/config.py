"""Experiment configuration: a TOML file plus flat command-line overrides.

Schema (every table optional)::

    seed = 0
    out = "runs/at_s2o"

    [dataset]   kind = "blobs" | "idx"; classes, dim, per_class, spread
                (blobs); image_path, label_path, test_image_path,
                test_label_path, limit (idx)
    [model]     hidden = [64, 64]; activation = "relu"
    [train]     TrainConfig fields; checkpoint_every, diagnostics
    [train.attack]   AttackConfig fields (training attack)
    [[eval.attacks]] AttackConfig fields plus ``name``
    [estimate]  estimator = "both" | "laplace" | "sampling"; noise_std,
                epochs, lr, eps_prime, batch_size, min_samples
    [bound]     sigma, sigma_convention, attack_model, gamma, delta,
                estimator
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from s2o.attacks import AttackConfig
from s2o.training import TrainConfig

TOY_EPSILON = 8 / 255
TOY_STEP = 2 / 255


def _attack(d: dict | None, **defaults) -> AttackConfig:
    d = {**defaults, **(d or {})}
    d.pop("name", None)
    if d.get("clamp") is not None:
        d["clamp"] = tuple(d["clamp"])
    return AttackConfig(**d)


def default_eval_attacks() -> dict[str, AttackConfig]:
    return {
        "fgsm": AttackConfig("linf", TOY_EPSILON, TOY_EPSILON, 1, False),
        "pgd20": AttackConfig("linf", TOY_EPSILON, TOY_STEP, 20, True),
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: dict = field(default_factory=lambda: {"kind": "blobs", "classes": 4, "dim": 20,
                                                   "per_class": 500, "spread": 0.5})
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint_every: int = 0
    diagnostics: bool = False
    eval_attacks: dict[str, AttackConfig] = field(default_factory=default_eval_attacks)
    estimate: dict = field(default_factory=lambda: {"estimator": "both", "noise_std": 0.01, "epochs": 50,
                                                    "lr": 1e-4, "eps_prime": 0.05, "batch_size": 128,
                                                    "min_samples": 5})
    bound: dict = field(default_factory=lambda: {"sigma": 1.0, "sigma_convention": "uniform",
                                                 "attack_model": "fgm", "gamma": 1.0, "delta": 0.05,
                                                 "estimator": "laplace"})
    source: str | None = None

    def __post_init__(self):
        kind = self.dataset.get("kind", "blobs")
        if kind not in ("blobs", "idx"):
            raise ValueError(f"unknown dataset kind {kind!r}")
        if kind == "idx":
            for key in ("image_path", "label_path"):
                if key not in self.dataset:
                    raise ValueError(f"dataset.{key} is required for idx datasets")
                if not Path(self.dataset[key]).exists():
                    raise FileNotFoundError(f"dataset.{key}: {self.dataset[key]} does not exist")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "out": self.out, "dataset": self.dataset, "hidden": list(self.hidden),
            "activation": self.activation, "train": self.train.to_dict(),
            "checkpoint_every": self.checkpoint_every, "diagnostics": self.diagnostics,
            "eval_attacks": {k: {f.name: getattr(a, f.name) for f in fields(a)}
                             for k, a in self.eval_attacks.items()},
            "estimate": self.estimate, "bound": self.bound,
        }

    def config_hash(self) -> str:
        """SHA-256 of the resolved config (output directory excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    seed = int(overrides.get("seed", raw.get("seed", 0)))
    base = ExperimentConfig()
    train_raw = dict(raw.get("train", {}))
    checkpoint_every = int(train_raw.pop("checkpoint_every", 0))
    diagnostics = bool(train_raw.pop("diagnostics", False))
    attack = _attack(train_raw.pop("attack", None), norm="linf", epsilon=TOY_EPSILON, step_size=TOY_STEP,
                     iterations=10, random_start=True)
    if "milestones" in train_raw:
        train_raw["milestones"] = tuple(train_raw["milestones"])
    train = TrainConfig(**{**train_raw, "attack": attack, "seed": seed})
    eval_raw = raw.get("eval", {}).get("attacks")
    eval_attacks = ({a.get("name", f"attack{i}"): _attack(a) for i, a in enumerate(eval_raw)}
                    if eval_raw else default_eval_attacks())
    model = raw.get("model", {})
    return ExperimentConfig(
        seed=seed,
        out=str(overrides.get("out", raw.get("out", base.out))),
        dataset={**base.dataset, **raw.get("dataset", {})},
        hidden=list(model.get("hidden", base.hidden)),
        activation=model.get("activation", base.activation),
        train=train, checkpoint_every=checkpoint_every, diagnostics=diagnostics,
        eval_attacks=eval_attacks,
        estimate={**base.estimate, **raw.get("estimate", {})},
        bound={**base.bound, **raw.get("bound", {})},
        source=str(path) if path else None,
    )
