"""Numerical-ensemble augmentation: ROI-volume regressors trained on K repetitions.

Trees are stored in heap layout (children of node i at 2i+1 and 2i+2) so a
forest is a handful of dense (n_trees, 2**(depth+1) - 1) arrays. Per-tree
randomness (bootstrap indices, per-node feature orderings) is drawn up front
from named child streams; the numba kernels are fully deterministic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from trainvar.rng import stream
from trainvar.stats import Correlation, LineFit, linear_fit, pearson


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    target: float
    repetitions: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.repetitions:
            raise AugmentError(f"subject {self.subject_id} has no repetitions")
        reps = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.repetitions.items()}
        lengths = {v.shape for v in reps.values()}
        if len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise AugmentError(f"subject {self.subject_id}: repetition vectors differ in length")
        object.__setattr__(self, "repetitions", dict(sorted(reps.items())))

    @property
    def rep_ids(self) -> list[int]:
        return list(self.repetitions)

    @property
    def n_features(self) -> int:
        return len(next(iter(self.repetitions.values())))


def write_records(path: Path, records: Sequence[SubjectRecord], region_names: Sequence[str] | None = None) -> None:
    d = records[0].n_features
    names = list(region_names) if region_names is not None else [f"region_{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "repetition_id", "target", *names])
        for r in records:
            for rep, v in r.repetitions.items():
                w.writerow([r.subject_id, rep, repr(float(r.target)), *(repr(float(x)) for x in v)])


def read_records(path: Path) -> tuple[list[SubjectRecord], list[str]]:
    """Parse a records CSV; returns the records and the region column names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AugmentError(f"{path}: empty file") from None
        if header[:3] != ["subject_id", "repetition_id", "target"] or len(header) < 4:
            raise AugmentError(f"{path}: header must start with subject_id,repetition_id,target "
                               "and name at least one region column")
        targets: dict[str, float] = {}
        reps: dict[str, dict[int, np.ndarray]] = {}
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise AugmentError(f"{path}:{line_no}: expected {len(header)} columns, got {len(row)}")
            sid, rep, target = row[0], int(row[1]), float(row[2])
            if sid in targets and targets[sid] != target:
                raise AugmentError(f"{path}:{line_no}: subject {sid} has conflicting targets")
            targets[sid] = target
            if rep in reps.setdefault(sid, {}):
                raise AugmentError(f"{path}:{line_no}: duplicate repetition {rep} for subject {sid}")
            reps[sid][rep] = np.array([float(x) for x in row[3:]])
    return [SubjectRecord(sid, targets[sid], reps[sid]) for sid in targets], header[3:]


@dataclass
class AugmentedDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    subjects_train: list[str]
    reps_train: list[int]
    x_test: np.ndarray
    y_test: np.ndarray
    subjects_test: list[str]
    reps_test: list[int]
    split: dict[str, str] = field(default_factory=dict)


def build_augmented_dataset(records: Sequence[SubjectRecord], k: int, split_seed: int = 0,
                            test_fraction: float = 0.2) -> AugmentedDataset:
    """Subject-level split; train on the first ``k`` repetitions, test on the first only."""
    if not records:
        raise AugmentError("no records")
    available = min(len(r.repetitions) for r in records)
    if not 1 <= k <= available:
        raise AugmentError(f"k must lie in [1, {available}], got {k}")
    recs = sorted(records, key=lambda r: r.subject_id)
    if len({r.subject_id for r in recs}) != len(recs):
        raise AugmentError("duplicate subject ids")
    n = len(recs)
    n_test = int(round(test_fraction * n))
    if n_test < 2 or n - n_test < 2:
        raise AugmentError(f"need at least 2 subjects per split, got {n - n_test} train / {n_test} test")
    perm = stream(split_seed, "augment.split").permutation(n)
    test_idx = set(perm[:n_test].tolist())
    split = {r.subject_id: ("test" if i in test_idx else "train") for i, r in enumerate(recs)}
    xtr, ytr, str_, rtr, xte, yte, ste, rte = [], [], [], [], [], [], [], []
    for r in recs:
        if split[r.subject_id] == "train":
            for rep in r.rep_ids[:k]:
                xtr.append(r.repetitions[rep]); ytr.append(r.target); str_.append(r.subject_id); rtr.append(rep)
        else:
            rep = r.rep_ids[0]
            xte.append(r.repetitions[rep]); yte.append(r.target); ste.append(r.subject_id); rte.append(rep)
    return AugmentedDataset(np.array(xtr), np.array(ytr), str_, rtr, np.array(xte), np.array(yte), ste, rte, split)


@numba.njit(cache=True)
def _grow_tree(x, y, rows, order, max_depth, mtry, feat, thr, val):
    n_nodes = feat.shape[0]
    # explicit stack of (node, start, end) over a working copy of row indices
    idx = rows.copy()
    stack = np.empty((n_nodes, 3), dtype=np.int64)
    stack[0, 0], stack[0, 1], stack[0, 2] = 0, 0, idx.shape[0]
    top = 1
    while top > 0:
        top -= 1
        node, a, b = stack[top, 0], stack[top, 1], stack[top, 2]
        m = b - a
        s = 0.0
        for i in range(a, b):
            s += y[idx[i]]
        mean = s / m
        val[node] = mean
        feat[node] = -1
        depth = int(math.floor(math.log2(node + 1) + 1e-9))
        if depth >= max_depth or m < 2 or 2 * node + 2 >= n_nodes:
            continue
        sse_node = 0.0
        for i in range(a, b):
            sse_node += (y[idx[i]] - mean) ** 2
        if sse_node <= 0.0:
            continue
        best_gain, best_f, best_t = 0.0, -1, 0.0
        sub = idx[a:b]
        for q in range(mtry):
            f = order[node, q]
            xs = x[sub, f]
            o = np.argsort(xs, kind="mergesort")
            xs = xs[o]
            ys = y[sub][o]
            left_sum, left_sq = 0.0, 0.0
            tot_sq = 0.0
            for i in range(m):
                tot_sq += ys[i] * ys[i]
            for i in range(m - 1):
                left_sum += ys[i]
                left_sq += ys[i] * ys[i]
                if xs[i] == xs[i + 1]:
                    continue
                nl = i + 1
                nr = m - nl
                right_sum = s - left_sum
                sse = (left_sq - left_sum * left_sum / nl) + (tot_sq - left_sq - right_sum * right_sum / nr)
                gain = sse_node - sse
                if gain > best_gain + 1e-12 * sse_node:
                    best_gain, best_f, best_t = gain, f, 0.5 * (xs[i] + xs[i + 1])
        if best_f < 0:
            continue
        # partition idx[a:b] in place, stable
        left = np.empty(m, dtype=np.int64)
        right = np.empty(m, dtype=np.int64)
        nl, nr = 0, 0
        for i in range(a, b):
            r = idx[i]
            if x[r, best_f] <= best_t:
                left[nl] = r; nl += 1
            else:
                right[nr] = r; nr += 1
        for i in range(nl):
            idx[a + i] = left[i]
        for i in range(nr):
            idx[a + nl + i] = right[i]
        feat[node] = best_f
        thr[node] = best_t
        stack[top, 0], stack[top, 1], stack[top, 2] = 2 * node + 1, a, a + nl
        top += 1
        stack[top, 0], stack[top, 1], stack[top, 2] = 2 * node + 2, a + nl, b
        top += 1


@numba.njit(cache=True)
def _predict_trees(x, feat, thr, val):
    n_trees = feat.shape[0]
    out = np.empty((n_trees, x.shape[0]))
    for t in range(n_trees):
        for i in range(x.shape[0]):
            node = 0
            while feat[t, node] >= 0:
                if x[i, feat[t, node]] <= thr[t, node]:
                    node = 2 * node + 1
                else:
                    node = 2 * node + 2
            out[t, i] = val[t, node]
    return out


@dataclass(frozen=True)
class RandomForest:
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    n_features: int

    def predict_trees(self, x) -> np.ndarray:
        x = _as_2d(x, self.n_features)
        return _predict_trees(x, self.feature, self.threshold, self.value)

    def predict(self, x) -> np.ndarray:
        return self.predict_trees(x).mean(axis=0)


def _as_2d(x, d: int) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != d:
        raise AugmentError(f"expected an (n, {d}) feature matrix, got shape {x.shape}")
    return x


def train_random_forest(x, y, n_trees: int = 100, max_depth: int = 8, rf_seed: int = 0,
                        max_features: int | None = None, bootstrap: bool = True) -> RandomForest:
    """CART regression forest: bootstrap rows, ``sqrt(d)`` candidate features per split."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise AugmentError("need at least one training row")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise AugmentError(f"need an (n, d) feature matrix for {y.size} targets, got shape {x.shape}")
    if n_trees < 1 or max_depth < 0:
        raise AugmentError("n_trees must be >= 1 and max_depth >= 0")
    n, d = x.shape
    mtry = max_features or max(1, int(math.isqrt(d)))
    mtry = min(mtry, d)
    n_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, n_nodes), -1, dtype=np.int64)
    thr = np.zeros((n_trees, n_nodes))
    val = np.zeros((n_trees, n_nodes))
    n_inner = 2 ** max_depth - 1
    for t in range(n_trees):
        rng = stream(rf_seed, f"forest.tree{t}")
        rows = rng.integers(0, n, n) if bootstrap else np.arange(n)
        order = np.argsort(rng.random((max(n_inner, 1), d)), axis=1)[:, :mtry].astype(np.int64)
        if n_inner == 0:
            order = np.zeros((n_nodes, mtry), dtype=np.int64)
        else:
            order = np.concatenate([order, np.zeros((n_nodes - n_inner, mtry), dtype=np.int64)])
        _grow_tree(x, y, rows.astype(np.int64), order, max_depth, mtry, feat[t], thr[t], val[t])
    return RandomForest(feat, thr, val, d)


@dataclass(frozen=True)
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, x) -> np.ndarray:
        return _as_2d(x, self.coef.size) @ self.coef + self.intercept


def train_linear_regressor(x, y, ridge: float = 1e-6) -> LinearModel:
    """Least squares with an unpenalised intercept and ridge penalty ``ridge`` on the slopes."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.size or y.size == 0:
        raise AugmentError("need an (n, d) feature matrix and n targets")
    if ridge < 0:
        raise AugmentError("ridge penalty must be non-negative")
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    a = xc.T @ xc + ridge * np.eye(x.shape[1])
    if ridge == 0.0 and np.linalg.matrix_rank(xc) < x.shape[1]:
        raise AugmentError("singular least-squares system; use a positive ridge penalty")
    coef = np.linalg.solve(a, xc.T @ yc)
    return LinearModel(coef, float(ym - xm @ coef))


def evaluate_mae(model, x, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise AugmentError("empty evaluation split")
    return float(np.mean(np.abs(model.predict(x) - y)))


MODEL_KINDS = ("forest", "linear")


@dataclass
class SweepResult:
    ks: list[int]
    mae: np.ndarray  # (len(ks), n_seeds)
    fit: LineFit
    correlation: Correlation
    model: str
    seeds: list[int]

    @property
    def mean_mae(self) -> np.ndarray:
        return self.mae.mean(axis=1)

    @property
    def std_mae(self) -> np.ndarray:
        return self.mae.std(axis=1, ddof=1) if self.mae.shape[1] > 1 else np.zeros(len(self.ks))

    def summary(self) -> dict:
        return {"model": self.model, "seeds": self.seeds, "k_max": max(self.ks),
                "slope": self.fit.slope, "intercept": self.fit.intercept,
                "pearson_r": self.correlation.r, "pearson_p": self.correlation.p_value}

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "mean_MAE", "std_MAE"])
            for k, m, s in zip(self.ks, self.mean_mae, self.std_mae):
                w.writerow([k, repr(float(m)), repr(float(s))])
        (out_dir / "sweep.json").write_text(json.dumps(self.summary(), indent=1) + "\n")


def augmentation_sweep(records: Sequence[SubjectRecord], k_max: int, model: str = "forest",
                       seeds: Sequence[int] = range(5), *, n_trees: int = 100, max_depth: int = 8,
                       ridge: float = 1e-6, test_fraction: float = 0.2) -> SweepResult:
    """Test MAE for k = 1..k_max, averaged over seeds; then a line and Pearson r of MAE vs k.

    Each seed sets both the subject split and the forest seed.
    """
    if model not in MODEL_KINDS:
        raise AugmentError(f"model must be one of {MODEL_KINDS}, got {model!r}")
    available = min(len(r.repetitions) for r in records)
    if not 1 <= k_max <= available:
        raise AugmentError(f"k_max must lie in [1, {available}], got {k_max}")
    if k_max < 3:
        raise AugmentError("k_max must be at least 3 to fit and correlate MAE against k")
    seeds = [int(s) for s in seeds]
    ks = list(range(1, k_max + 1))
    mae = np.zeros((len(ks), len(seeds)))
    for i, k in enumerate(ks):
        for j, s in enumerate(seeds):
            ds = build_augmented_dataset(records, k, s, test_fraction)
            if model == "forest":
                m = train_random_forest(ds.x_train, ds.y_train, n_trees, max_depth, rf_seed=s)
            else:
                m = train_linear_regressor(ds.x_train, ds.y_train, ridge)
            mae[i, j] = evaluate_mae(m, ds.x_test, ds.y_test)
    means = mae.mean(axis=1)
    return SweepResult(ks, mae, linear_fit(ks, means), pearson(ks, means), model, seeds)


def synthetic_records(n_subjects: int = 400, n_reps: int = 10, n_regions: int = 4, seed: int = 0,
                      rep_noise: float = 0.5, target_noise: float = 0.2) -> list[SubjectRecord]:
    """Noise-averaging ensemble: each repetition is the true volume vector plus fresh noise.

    Targets are a fixed linear function of the true volumes plus noise, so
    extra repetitions carry extra information about the noise-free signal.
    """
    rng = stream(seed, "augment.synthetic")
    true = rng.normal(0.0, 1.0, (n_subjects, n_regions))
    w = np.linspace(1.0, -0.5, n_regions)
    targets = true @ w + rng.normal(0.0, target_noise, n_subjects)
    noise = rng.normal(0.0, rep_noise, (n_subjects, n_reps, n_regions))
    return [SubjectRecord(f"s{i:04d}", float(targets[i]),
                          {r + 1: true[i] + noise[i, r] for r in range(n_reps)})
            for i in range(n_subjects)]


def records_from_family(member_volumes: Sequence[np.ndarray], true_volumes: np.ndarray, seed: int = 0,
                        target_noise: float = 0.05, regions: Sequence[int] | None = None) -> list[SubjectRecord]:
    """Records whose repetitions are the members' predicted region volumes.

    ``member_volumes[m]`` is (subjects, regions) for member m; targets are a
    fixed linear function of the ground-truth volumes (scaled to unit mean)
    plus noise.
    """
    true = np.asarray(true_volumes, dtype=np.float64)
    cols = list(range(true.shape[1])) if regions is None else list(regions)
    if len(member_volumes) < 1:
        raise AugmentError("need at least one member")
    scale = true[:, cols].mean(axis=0)
    scale[scale == 0] = 1.0
    rng = stream(seed, "augment.family-targets")
    w = np.linspace(1.0, -0.5, len(cols))
    targets = (true[:, cols] / scale) @ w + rng.normal(0.0, target_noise, len(true))
    out = []
    for s in range(len(true)):
        reps = {m + 1: np.asarray(v, dtype=np.float64)[s, cols] for m, v in enumerate(member_volumes)}
        out.append(SubjectRecord(f"s{s:04d}", float(targets[s]), reps))
    return out
