"""Run configuration: namespaced defaults, JSON config files and flag overrides."""

from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

from .losses import ConfigError, LossConfig
from .perturb import PerturbationConfig
from .train import TrainConfig

log = logging.getLogger(__name__)

# Offsets added to the single run seed to derive per-subsystem seeds.
SEED_OFFSETS = {
    "data": 0,
    "teacher": 0,  # teacher j uses seed + j
    "student_init": 1000,
    "distill": 2000,
    "scratch": 3000,
    "perturb": 4000,
    "jacobian": 5000,
    "dee": 6000,
    "ood": 7000,
}

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.kind": "spirals",
    "data.k": 4,
    "data.d": 2,
    "data.n": 250,
    "data.noise": 0.01,
    "data.spread": 0.3,
    "data.turns": 1.0,
    "data.r_min": 0.06,
    "data.r_max": 0.5,
    "data.ood_shift": 0.3,
    "model.hidden": [64, 64],
    "model.factor_init": "sign",
    "teacher.m": 4,
    "teacher.lr": 0.1,
    "teacher.epochs": 100,
    "teacher.warmup_epochs": 3,
    "teacher.batch_size": 32,
    "teacher.momentum": 0.9,
    "teacher.weight_decay": 0.0,
    "student.lr": 0.02,
    "student.epochs": 100,
    "student.warmup_epochs": 3,
    "student.batch_size": 32,
    "student.momentum": 0.9,
    "student.weight_decay": 0.0,
    "loss.alpha": 0.9,
    "loss.tau": 4.0,
    "perturb.strategy": "ods",
    "perturb.eta": 1 / 255,
    "perturb.tau": None,  # None follows loss.tau
    "perturb.sigma": None,
    "perturb.gaussian_unit_norm": False,
    "perturb.share_per_batch": False,
    "eval.ece_bins": 15,
    "eval.dee_subsets": 3,
    "diversity.bins": 20,
    "jacobian.samples": 64,
    "jacobian.snr_etas": [1 / 255, 2 / 255, 4 / 255, 8 / 255],
    "jacobian.snr_points": 128,
}


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return [type(default[0])(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}") from None
    return value


class RunConfig:
    """Merged configuration: defaults, then a JSON file, then command-line overrides."""

    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        self.sources = {k: "default" for k in DEFAULTS}
        if values:
            self.update(values, "init")

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file {path} does not exist")
            try:
                tree = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(tree, dict):
                raise ConfigError(f"config file {path} must hold a JSON object")
            cfg.update(_flatten(tree), str(path))
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None}, "flag")
        return cfg

    def update(self, values: dict, source: str) -> None:
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in values.items():
            if self.sources[k] != "default" and self.values[k] != v:
                log.info("config %s: %r from %s overrides %r from %s", k, v, source, self.values[k], self.sources[k])
            self.values[k] = _coerce(k, v)
            self.sources[k] = source

    def __getitem__(self, key: str):
        return self.values[key]

    def seed_for(self, subsystem: str, index: int = 0) -> int:
        return int(self["seed"]) + SEED_OFFSETS[subsystem] + index

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def train_config(self, role: str) -> TrainConfig:
        return TrainConfig(base_lr=self[f"{role}.lr"], epochs=self[f"{role}.epochs"],
                           warmup_epochs=self[f"{role}.warmup_epochs"], batch_size=self[f"{role}.batch_size"],
                           momentum=self[f"{role}.momentum"], weight_decay=self[f"{role}.weight_decay"])

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self["loss.alpha"], tau=self["loss.tau"])

    def perturb_config(self) -> PerturbationConfig:
        tau = self["perturb.tau"] if self["perturb.tau"] is not None else self["loss.tau"]
        try:
            return PerturbationConfig(strategy=self["perturb.strategy"], eta=float(self["perturb.eta"]),
                                      tau=float(tau), sigma=self["perturb.sigma"],
                                      gaussian_unit_norm=self["perturb.gaussian_unit_norm"],
                                      share_per_batch=self["perturb.share_per_batch"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def widths(self, in_dim: int, num_classes: int) -> list[int]:
        return [in_dim, *self["model.hidden"], num_classes]
