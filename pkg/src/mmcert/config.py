"""Experiment configuration: one JSON document with named sections.

Missing keys take the defaults below.  After loading, every default is
materialised so the echoed ``config.json`` fully describes a run.  Section
seeds are derived from the global seed unless a section sets its own.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .attacks import AttackSpec
from .data import GenSpec, preset
from .model import ModelConfig
from .train import TrainConfig

SEED_OFFSETS = {"data": 0, "model": 1, "train": 2, "attack": 3, "oracle": 4}

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "jobs": 1,
    "data": {"preset": "skewed"},
    "model": {"hidden": [32], "out_dim": 16, "activation": "tanh"},
    "train": {
        "rho": 0.03,
        "learning_rate": 0.05,
        "learning_rate_step2": 0.01,
        "epochs_step1": 100,
        "epochs_step2": 30,
        "batch_size": 64,
        "optimizer": "sgd-momentum",
        "momentum": 0.9,
        "weight_decay": 0.01,
        "iterations": 1,
        "step2_correct_only": False,
        "at": {"family": "pgd_l2", "epsilon": 2.0, "steps": 10},
    },
    "certify": {"split": "test"},
    "attack": {
        "epsilon_unit": 4.0,
        "grid": [0.1, 0.25, 0.5, 1.0, 2.0],
        "families": ["pgd_l2", "fgm", "missing"],
        "steps": 20,
        "split": "test",
    },
    "oracle": {"n_samples": 500, "tol": 1e-4, "steps": 100, "restarts": 5, "split": "test"},
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def materialize(raw: dict | None = None, seed: int | None = None,
                output_dir: str | None = None) -> dict:
    """Fill defaults, derive section seeds and validate.

    An explicit ``seed`` argument replaces the global seed and every derived
    section seed, including seeds written into the sections.
    """
    raw = raw or {}
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    for section, offset in SEED_OFFSETS.items():
        if seed is not None or "seed" not in cfg[section]:
            cfg[section]["seed"] = cfg["seed"] + offset

    data = dict(cfg["data"])
    name = data.pop("preset", None)
    try:
        spec = preset(name, **data) if name else GenSpec(**data)
        spec.validate()
    except TypeError as exc:
        raise ConfigError(f"data: {exc}") from None
    cfg["data"] = {"preset": name, **spec.__dict__}

    grid = cfg["attack"]["grid"]
    if not grid or list(grid) != sorted(grid) or min(grid) < 0:
        raise ConfigError("attack.grid must be a non-empty ascending list of budgets >= 0")
    if cfg["attack"]["epsilon_unit"] <= 0:
        raise ConfigError("attack.epsilon_unit must be positive")
    if cfg["oracle"]["n_samples"] < 1:
        raise ConfigError("oracle.n_samples must be >= 1")
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    train_config(cfg).validate()
    model_config(cfg, "standard").validate()
    return cfg


def load_config(path=None, seed=None, output_dir=None) -> dict:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return materialize(raw, seed, output_dir)


def gen_spec(cfg) -> GenSpec:
    data = {k: v for k, v in cfg["data"].items() if k != "preset"}
    return GenSpec(**data)


def model_config(cfg, head: str) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(list(cfg["data"]["dims"]), cfg["data"]["K"], hidden=list(m["hidden"]),
                       out_dim=m["out_dim"], activation=m["activation"], head=head)


def train_config(cfg) -> TrainConfig:
    t = dict(cfg["train"])
    at = t.pop("at", None)
    spec = None
    if at:
        spec = AttackSpec(at["family"], epsilon=at["epsilon"],
                          targets=tuple(range(len(cfg["data"]["dims"]))),
                          steps=at.get("steps", 20), seed=t.get("seed", 0))
    try:
        return TrainConfig(**t, at_spec=spec)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
