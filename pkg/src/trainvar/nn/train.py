"""Deterministic momentum-SGD training with cosine warm restarts."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from trainvar.mca import Arithmetic, McaConfig
from trainvar.nn.layers import ConfigError
from trainvar.nn.losses import LossWeights, loss_terms
from trainvar.nn.model import Model, NumericBlowUp, loss_and_grads, predict
from trainvar.rng import stream


@dataclass
class TrainConfig:
    epochs: int = 40
    base_lr: float = 0.05
    min_lr: float = 0.0
    t0: int = 10
    t_mult: int = 3
    momentum: float = 0.9
    w_ce: float = 1.0
    w_dice: float = 1.0
    batch_size: int = 2
    seed: int = 0
    arithmetic: McaConfig = field(default_factory=McaConfig)

    def __post_init__(self):
        if isinstance(self.arithmetic, dict):
            self.arithmetic = McaConfig.from_dict(self.arithmetic)
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.base_lr <= 0 or self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError(f"need 0 <= min_lr <= base_lr and base_lr > 0, got {self.min_lr}, {self.base_lr}")
        if self.t0 < 1 or self.t_mult < 1:
            raise ConfigError("t0 and t_mult must be positive integers")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        LossWeights(self.w_ce, self.w_dice)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_ce, self.w_dice)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "arithmetic"}
        d["arithmetic"] = self.arithmetic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> TrainConfig:
        d = self.to_dict()
        d.update({k: v.to_dict() if isinstance(v, McaConfig) else v for k, v in changes.items()})
        return TrainConfig.from_dict(d)


def restart_epochs(cfg: TrainConfig, until: int) -> list[int]:
    """Global epochs ``< until`` at which a new cosine cycle starts."""
    out, start, length = [], 0, cfg.t0
    while start < until:
        out.append(start)
        start += length
        length *= cfg.t_mult
    return out


def sgdr_lr(global_epoch: int, cfg: TrainConfig) -> float:
    if global_epoch < 0:
        raise ValueError("global_epoch must be non-negative")
    start, length = 0, cfg.t0
    while global_epoch >= start + length:
        start += length
        length *= cfg.t_mult
    tau = global_epoch - start
    if tau == 0:
        return cfg.base_lr
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * tau / length))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    train_dice: float
    train_total: float
    val_ce: float
    val_dice: float
    val_total: float


LOSS_COLUMNS = [f.name for f in fields(EpochRecord)]
LOSS_COMPONENTS = LOSS_COLUMNS[2:]


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    counters: Counter


def evaluate(model: Model, x, y, weights: LossWeights) -> tuple[float, float, float]:
    """IEEE eval-mode ``(ce, dice, total)`` over a whole split."""
    return loss_terms(predict(model, x), np.asarray(y), weights)


def train(model: Model, dataset, cfg: TrainConfig, *, epochs: int | None = None) -> TrainResult:
    """Train ``model`` in place on ``dataset.x_train``/``y_train`` in fixed order.

    Validation losses are evaluated after each epoch with IEEE arithmetic.
    Runs are a pure function of ``(model, dataset, cfg)``.
    """
    x, y = dataset.x_train, dataset.y_train
    if len(x) == 0:
        raise ValueError("empty training split")
    mca = McaConfig.from_dict(cfg.arithmetic.to_dict())
    ar = Arithmetic(mca)
    drop_rng = stream(cfg.seed, "dropout")
    weights = cfg.weights
    counters: Counter = Counter()
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in model.params]
    history = []
    n_epochs = cfg.epochs if epochs is None else epochs
    for _ in range(n_epochs):
        epoch = model.epoch
        lr = sgdr_lr(epoch, cfg)
        sums = np.zeros(3)
        n_batches = 0
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            xb, yb = x[start:start + cfg.batch_size], y[start:start + cfg.batch_size]
            try:
                terms, grads = loss_and_grads(model, xb, yb, weights, ar, True, drop_rng, counters)
                if not np.isfinite(terms).all():
                    raise NumericBlowUp(len(model.spec.layers) - 1, "loss")
            except NumericBlowUp as exc:
                raise NumericBlowUp(exc.layer, exc.where, epoch, b) from None
            for p, v, g in zip(model.params, velocity, grads):
                for k in p:
                    v[k] = ar.add(ar.mul(cfg.momentum, v[k]), g[k])
                    p[k] = ar.sub(p[k], ar.mul(lr, v[k]))
            sums += terms
            n_batches += 1
        train_terms = sums / n_batches
        val_terms = evaluate(model, dataset.x_val, dataset.y_val, weights)
        history.append(EpochRecord(epoch, lr, *map(float, train_terms), *map(float, val_terms)))
        model.epoch += 1
    counters["nonfinite"] += mca.nonfinite_count
    return TrainResult(model, history, counters)


def write_losses(path: Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for rec in history:
            row = asdict(rec)
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


def read_losses(path: Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOSS_COLUMNS:
            raise ValueError(f"{path}: expected columns {LOSS_COLUMNS}, got {reader.fieldnames}")
        return [EpochRecord(int(r["epoch"]), *(float(r[c]) for c in LOSS_COLUMNS[1:])) for r in reader]
