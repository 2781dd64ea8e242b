"""Strict TOML experiment configs.

Every section and key is checked against the schema below before anything
runs; a typo is an error, never a silently ignored setting.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from trainvar.mca import MAX_PRECISION
from trainvar.nn.init import SCHEMES
from trainvar.nn.model import NetworkSpec, mnist_net, segmentation_net
from trainvar.nn.train import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


_SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "experiment": {"name": str},
    "dataset": {
        "kind": str, "path": str, "images": str, "labels": str,
        "n_subjects": int, "size": int, "n_classes": int, "seed": int, "noise": (int, float),
        "shapes_per_class": int, "val_fraction": float, "test_fraction": float,
        "n_train": int, "n_val": int, "n_test": int,
    },
    "network": {"preset": str, "width": int, "dropout": (int, float), "init_scheme": str},
    "training": {
        "epochs": int, "base_lr": (int, float), "min_lr": (int, float), "t0": int, "t_mult": int,
        "momentum": (int, float), "w_ce": (int, float), "w_dice": (int, float), "batch_size": int, "seed": int,
    },
    "family": {"kind": str, "members": int, "precision": int, "seeds": list, "schemes": list},
    "analysis": {"alpha": float, "regions": list, "epoch_cutoff": int},
    "augment": {
        "k_max": int, "model": str, "seeds": list, "n_trees": int, "max_depth": int,
        "ridge": (int, float), "test_fraction": float,
    },
}

DATASET_KINDS = ("synthetic", "mnist", "directory")
PRESETS = ("segmentation", "mnist")
FAMILY_KINDS = ("ieee_baseline", "mca", "random_seed", "weight_init")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "synthetic"})
    network: dict[str, Any] = field(default_factory=lambda: {"preset": "segmentation"})
    training: dict[str, Any] = field(default_factory=dict)
    family: dict[str, Any] = field(default_factory=lambda: {"kind": "ieee_baseline"})
    analysis: dict[str, Any] = field(default_factory=dict)
    augment: dict[str, Any] = field(default_factory=dict)
    source: Path | None = None

    def resolve(self, p: str) -> Path:
        """Paths in a config file are relative to that file."""
        path = Path(p)
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        return path

    def network_spec(self) -> NetworkSpec:
        n = dict(self.network)
        preset = n.pop("preset", "segmentation")
        if preset == "segmentation":
            ds = self.dataset
            return segmentation_net(size=ds.get("size", 32), n_classes=ds.get("n_classes", 4), **n)
        return mnist_net(**n)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(dict(self.training))


def _check_types(section: str, values: dict[str, Any]) -> None:
    schema = _SCHEMA[section]
    for key, value in values.items():
        if key not in schema:
            raise ConfigError(f"{section}.{key}", f"unknown key (allowed: {', '.join(sorted(schema))})")
        want = schema[key]
        if isinstance(value, bool) or not isinstance(value, want):
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                continue
            names = want.__name__ if isinstance(want, type) else "/".join(t.__name__ for t in want)
            raise ConfigError(f"{section}.{key}", f"expected {names}, got {type(value).__name__}")


def _ints(section: str, key: str, values) -> None:
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        raise ConfigError(f"{section}.{key}", "expected a list of integers")


def validate(raw: dict[str, Any], source: Path | None = None) -> ExperimentConfig:
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(section, f"unknown section (allowed: {', '.join(sorted(_SCHEMA))})")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        _check_types(section, body)
    cfg = ExperimentConfig(source=source)
    cfg.name = raw.get("experiment", {}).get("name", cfg.name)
    for section in ("dataset", "network", "family"):
        merged = {**getattr(cfg, section), **raw.get(section, {})}
        setattr(cfg, section, merged)
    for section in ("training", "analysis", "augment"):
        setattr(cfg, section, dict(raw.get(section, {})))

    ds = cfg.dataset
    if ds["kind"] not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}")
    if ds["kind"] == "mnist" and not {"images", "labels"} <= set(ds):
        raise ConfigError("dataset.images", "mnist datasets need both images and labels paths")
    if ds["kind"] == "directory" and "path" not in ds:
        raise ConfigError("dataset.path", "directory datasets need a path")
    for key in ("n_subjects", "size", "n_classes"):
        if key in ds and ds[key] < 1:
            raise ConfigError(f"dataset.{key}", "must be positive")

    net = cfg.network
    if net["preset"] not in PRESETS:
        raise ConfigError("network.preset", f"must be one of {PRESETS}")
    if net.get("init_scheme", "kaiming_uniform") not in SCHEMES:
        raise ConfigError("network.init_scheme", f"must be one of {SCHEMES}")
    if not 0.0 <= net.get("dropout", 0.1) < 1.0:
        raise ConfigError("network.dropout", "must lie in [0, 1)")

    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None

    fam = cfg.family
    if fam["kind"] not in FAMILY_KINDS:
        raise ConfigError("family.kind", f"must be one of {FAMILY_KINDS}")
    if "precision" in fam and not 1 <= fam["precision"] <= MAX_PRECISION:
        raise ConfigError("family.precision", f"must lie in [1, {MAX_PRECISION}]")
    if "members" in fam and fam["members"] < 1:
        raise ConfigError("family.members", "must be positive")
    if "seeds" in fam:
        _ints("family", "seeds", fam["seeds"])
    if "schemes" in fam:
        bad = [s for s in fam["schemes"] if s not in SCHEMES]
        if bad:
            raise ConfigError("family.schemes", f"unknown schemes {bad}")

    an = cfg.analysis
    if not 0.0 < an.get("alpha", 0.05) < 1.0:
        raise ConfigError("analysis.alpha", "must lie in (0, 1)")
    if "regions" in an:
        _ints("analysis", "regions", an["regions"])
    if an.get("epoch_cutoff", 1) < 1:
        raise ConfigError("analysis.epoch_cutoff", "must be positive")

    au = cfg.augment
    if au.get("model", "forest") not in ("forest", "linear"):
        raise ConfigError("augment.model", "must be 'forest' or 'linear'")
    if au.get("k_max", 3) < 1:
        raise ConfigError("augment.k_max", "must be positive")
    if "seeds" in au:
        _ints("augment", "seeds", au["seeds"])
    if au.get("ridge", 0.0) < 0:
        raise ConfigError("augment.ridge", "must be non-negative")
    return cfg


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from None
    return validate(raw, path)
