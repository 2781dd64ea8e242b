"""Sørensen-Dice agreement between labelled grids."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ComparabilityError(ValueError):
    """Maps with different shapes or label tables were compared."""


class ArityError(ValueError):
    """Too few maps (or members) for a pairwise statistic."""


@dataclass(frozen=True)
class SegmentationMap:
    labels: np.ndarray
    label_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"labels must be integers, got {labels.dtype}")
        object.__setattr__(self, "labels", labels.astype(np.int32, copy=False))
        table = {int(k): str(v) for k, v in self.label_table.items()}
        if not table:
            table = {int(c): f"region_{c}" for c in np.unique(labels)}
        object.__setattr__(self, "label_table", table)
        missing = set(np.unique(labels).tolist()) - set(table)
        if missing:
            raise ValueError(f"labels {sorted(missing)} are not in the label table")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape


def _check_pair(a: SegmentationMap, b: SegmentationMap) -> None:
    if a.shape != b.shape:
        raise ComparabilityError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.label_table != b.label_table:
        raise ComparabilityError("label tables differ")


def dice(a: SegmentationMap, b: SegmentationMap, region: int) -> float:
    """``2|A & B| / (|A| + |B|)`` for the cells labelled ``region``; 1 if both are empty."""
    _check_pair(a, b)
    sa = a.labels == region
    sb = b.labels == region
    total = int(sa.sum()) + int(sb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(sa & sb)) / total


def min_pairwise_dice(maps: list[SegmentationMap], region: int) -> float:
    """Worst-case agreement: the minimum Dice over all unordered pairs."""
    if len(maps) < 2:
        raise ArityError(f"need at least 2 maps, got {len(maps)}")
    return min(dice(a, b, region) for a, b in itertools.combinations(maps, 2))


def region_volumes(m: SegmentationMap) -> np.ndarray:
    """Cell count per region, in label-table order."""
    ids = np.fromiter(m.label_table, dtype=np.int64)
    counts = np.bincount(m.labels.ravel(), minlength=int(ids.max()) + 1 if ids.size else 0)
    return counts[ids].astype(np.int64)


def save_map(path: Path, m: SegmentationMap) -> None:
    """Write ``path`` (little-endian int32 .npy) and ``path`` + ``.labels.json``."""
    path = Path(path)
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(m.labels, dtype="<i4"))
    side = path.with_name(path.name + ".labels.json")
    side.write_text(json.dumps({str(k): v for k, v in m.label_table.items()}, indent=1) + "\n")


def load_map(path: Path) -> SegmentationMap:
    path = Path(path)
    labels = np.load(path)
    if labels.dtype != np.dtype("<i4"):
        raise ValueError(f"{path}: expected little-endian int32, got {labels.dtype}")
    table = json.loads(path.with_name(path.name + ".labels.json").read_text())
    return SegmentationMap(labels, {int(k): v for k, v in table.items()})
