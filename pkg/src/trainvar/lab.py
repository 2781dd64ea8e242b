"""Perturbation families: training, provenance manifests and variability analyses.

A family is a list of members that differ in exactly one source of variation
(arithmetic noise, seed, or weight-init scheme). Every member trains on the
same data in the same order; evaluation on the test split is always IEEE.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import shutil
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

import trainvar
from trainvar.data import Dataset
from trainvar.mca import McaConfig, Mode
from trainvar.nn.checkpoint import save_checkpoint
from trainvar.nn.init import SCHEMES
from trainvar.nn.model import Model, NetworkSpec, NumericBlowUp, predict
from trainvar.nn.train import LOSS_COMPONENTS, EpochRecord, TrainConfig, read_losses, train, write_losses
from trainvar.seg import ArityError, ComparabilityError, SegmentationMap, load_map, min_pairwise_dice, save_map
from trainvar.stats import TestResult, bonferroni, welch_t_test

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "trainvar-family"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPIKE_WINDOW = 5
SPIKE_FACTOR = 2.0


class FamilyKind(str, enum.Enum):
    IEEE_BASELINE = "ieee_baseline"
    MCA = "mca"
    RANDOM_SEED = "random_seed"
    WEIGHT_INIT = "weight_init"


class Verdict(str, enum.Enum):
    A_LESS_VARIABLE = "A_LESS_VARIABLE"
    A_MORE_VARIABLE = "A_MORE_VARIABLE"
    COMPARABLE = "COMPARABLE"


class ManifestError(ValueError):
    pass


class LossTruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Member:
    member_id: str
    train_config: TrainConfig
    spec: NetworkSpec
    strict_init: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {"member_id": self.member_id, "train_config": self.train_config.to_dict(),
                "network": self.spec.to_dict(), "strict_init": self.strict_init}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Member:
        return cls(d["member_id"], TrainConfig.from_dict(d["train_config"]),
                   NetworkSpec.from_dict(d["network"]), bool(d.get("strict_init", True)))


@dataclass(frozen=True)
class Family:
    kind: FamilyKind
    members: tuple[Member, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError("a family needs at least one member")
        if self.kind is FamilyKind.IEEE_BASELINE and len(self.members) != 1:
            raise ValueError("the IEEE baseline has exactly one member")
        ids = [m.member_id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ValueError("member ids must be unique")

    @classmethod
    def ieee(cls, spec: NetworkSpec, cfg: TrainConfig) -> Family:
        return cls(FamilyKind.IEEE_BASELINE, (Member("ieee", cfg.replace(arithmetic=McaConfig()), spec),))

    @classmethod
    def mca(cls, spec: NetworkSpec, cfg: TrainConfig, n: int = 5, precision: int = 24,
            seeds: Sequence[int] | None = None, forced_xi: float | None = None) -> Family:
        """Same seed and init for everyone; only the arithmetic noise stream differs."""
        seeds = list(range(n)) if seeds is None else list(seeds)
        members = tuple(
            Member(f"mca-{s}", cfg.replace(arithmetic=McaConfig(Mode.RANDOM_ROUNDING, precision, seed=s,
                                                                forced_xi=forced_xi)), spec)
            for s in seeds)
        return cls(FamilyKind.MCA, members)

    @classmethod
    def random_seed(cls, spec: NetworkSpec, cfg: TrainConfig, seeds: Sequence[int] = range(10)) -> Family:
        members = tuple(Member(f"seed-{s}", cfg.replace(seed=int(s), arithmetic=McaConfig()), spec)
                        for s in seeds)
        return cls(FamilyKind.RANDOM_SEED, members)

    @classmethod
    def weight_init(cls, spec: NetworkSpec, cfg: TrainConfig, schemes: Sequence[str] = SCHEMES) -> Family:
        # dirac/identity cannot apply to every layer; those layers fall back
        members = tuple(Member(f"init-{s}", cfg.replace(arithmetic=McaConfig()), spec.with_scheme(s),
                               strict_init=False) for s in schemes)
        return cls(FamilyKind.WEIGHT_INIT, members)

    @classmethod
    def build(cls, kind: FamilyKind | str, spec: NetworkSpec, cfg: TrainConfig, **kw) -> Family:
        kind = FamilyKind(kind)
        maker = {FamilyKind.IEEE_BASELINE: cls.ieee, FamilyKind.MCA: cls.mca,
                 FamilyKind.RANDOM_SEED: cls.random_seed, FamilyKind.WEIGHT_INIT: cls.weight_init}[kind]
        return maker(spec, cfg, **kw)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def engine_version() -> str:
    """Hash of the package sources, so manifests say which engine produced them."""
    root = Path(trainvar.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.images, ds.labels):
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    h.update(f"{ds.n_train},{ds.n_val},{ds.n_test}".encode())
    return h.hexdigest()


def _train_member(member: Member, ds: Dataset, root: Path, epochs: int | None) -> dict[str, Any]:
    mdir = root / member.member_id
    mdir.mkdir(parents=True, exist_ok=True)
    cfg = member.train_config
    rec: dict[str, Any] = {**member.to_dict(), "dir": member.member_id, "files": {}}
    t_start = time.perf_counter()
    model = Model.create(member.spec, cfg.seed, strict=member.strict_init)
    try:
        result = train(model, ds, cfg, epochs=epochs)
    except NumericBlowUp as exc:
        rec.update(status="failed", error=str(exc), duration_s=time.perf_counter() - t_start)
        log.warning("member %s failed: %s", member.member_id, exc)
        return rec
    rel = {"checkpoint": "checkpoint.json", "losses": "losses.csv"}
    save_checkpoint(mdir / rel["checkpoint"], result.model, cfg.to_dict())
    write_losses(mdir / rel["losses"], result.history)
    probs = predict(result.model, ds.x_test)
    pred = probs.argmax(axis=1).astype(np.int32)
    if ds.task == "segmentation":
        (mdir / "test").mkdir(exist_ok=True)
        outputs = []
        for i, lab in enumerate(pred):
            name = f"test/subject_{i:04d}.npy"
            save_map(mdir / name, SegmentationMap(lab, ds.label_table))
            outputs.append(name)
        rec["outputs"] = outputs
    else:
        np.save(mdir / "predictions.npy", pred.astype("<i4"))
        rec["outputs"] = ["predictions.npy"]
        rec["test_accuracy"] = float(np.mean(pred == ds.y_test))
    for name in [*rel.values(), *rec["outputs"]]:
        rec["files"][name] = _sha256_file(mdir / name)
    rec.update(rel)
    rec.update(status="ok", epochs_completed=len(result.history),
               final_val_total=result.history[-1].val_total,
               nonfinite=int(result.counters.get("nonfinite", 0)),
               duration_s=time.perf_counter() - t_start)
    return rec


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


def run_family(family: Family, dataset: Dataset, out_dir: Path, *, jobs: int = 1,
               epochs: int | None = None, force: bool = False, name: str | None = None) -> FamilyManifest:
    """Train every member and write ``out_dir/manifest.json``.

    ``epochs`` stops every member early (an epoch cutoff); the schedule itself
    is unchanged. Blow-ups mark a member as failed and the family continues.
    """
    out_dir = Path(out_dir)
    if (out_dir / MANIFEST_NAME).exists():
        if not force:
            raise FileExistsError(f"{out_dir / MANIFEST_NAME} exists (use force to overwrite)")
        for m in family.members:
            shutil.rmtree(out_dir / m.member_id, ignore_errors=True)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    if jobs > 1 and len(family.members) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_member, m, dataset, out_dir, epochs) for m in family.members]
            records = [f.result() for f in futures]
    else:
        records = [_train_member(m, dataset, out_dir, epochs) for m in family.members]
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": name or family.kind.value,
        "kind": family.kind.value,
        "engine_version": engine_version(),
        "package_version": trainvar.__version__,
        "dataset": {"task": dataset.task, "fingerprint": dataset_fingerprint(dataset),
                    "n_test": dataset.n_test, "label_table": {str(k): v for k, v in dataset.label_table.items()},
                    "meta": dataset.meta},
        "epoch_cutoff": epochs,
        "duration_s": time.perf_counter() - started,
        "members": records,
    }
    _write_json(out_dir / MANIFEST_NAME, manifest)
    return FamilyManifest(out_dir, manifest)


@dataclass
class FamilyManifest:
    root: Path
    data: dict[str, Any]

    @classmethod
    def load(cls, path: Path) -> FamilyManifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ManifestError(f"no manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        if data.get("format") != MANIFEST_FORMAT or data.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} manifest")
        return cls(path.parent, data)

    @property
    def kind(self) -> FamilyKind:
        return FamilyKind(self.data["kind"])

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def records(self) -> list[dict[str, Any]]:
        return self.data["members"]

    @property
    def ok(self) -> list[dict[str, Any]]:
        return [r for r in self.records if r["status"] == "ok"]

    def record(self, member_id: str) -> dict[str, Any]:
        for r in self.records:
            if r["member_id"] == member_id:
                return r
        raise KeyError(member_id)

    def path(self, rec: dict[str, Any], name: str) -> Path:
        return self.root / rec["dir"] / name

    def verify(self) -> list[str]:
        """Files whose content hash no longer matches the manifest."""
        bad = []
        for rec in self.ok:
            for name, digest in rec["files"].items():
                p = self.path(rec, name)
                if not p.exists() or _sha256_file(p) != digest:
                    bad.append(f"{rec['member_id']}/{name}")
        return bad

    def losses(self, rec: dict[str, Any]) -> list[EpochRecord]:
        return read_losses(self.path(rec, rec["losses"]))

    def maps(self, rec: dict[str, Any]) -> list[SegmentationMap]:
        if self.data["dataset"]["task"] != "segmentation":
            raise ManifestError("segmentation maps exist only for segmentation families")
        return [load_map(self.path(rec, name)) for name in rec["outputs"]]

    def predictions(self, rec: dict[str, Any]) -> np.ndarray:
        return np.load(self.path(rec, rec["outputs"][0]))

    def member(self, rec: dict[str, Any]) -> Member:
        return Member.from_dict(rec)


def reproduce_member(manifest: FamilyManifest, member_id: str, dataset: Dataset, out_dir: Path) -> bool:
    """Re-train one member from its recorded config; True if the checkpoint is bit-identical."""
    rec = manifest.record(member_id)
    if rec["status"] != "ok":
        raise ManifestError(f"member {member_id} did not complete")
    if dataset_fingerprint(dataset) != manifest.data["dataset"]["fingerprint"]:
        raise ManifestError("dataset differs from the one recorded in the manifest")
    again = _train_member(manifest.member(rec), dataset, Path(out_dir), manifest.data.get("epoch_cutoff"))
    return again.get("files", {}).get(rec["checkpoint"]) == rec["files"][rec["checkpoint"]]


@dataclass(frozen=True)
class RegionVariabilityStats:
    region: int
    family: str
    values: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("min-Dice values must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0


def min_dice_table(member_maps: Sequence[Sequence[SegmentationMap]], regions: Iterable[int],
                   subjects: Sequence[int] | None = None) -> np.ndarray:
    """(subjects, regions) array of min pairwise Dice across members."""
    if len(member_maps) < 2:
        raise ArityError(f"need at least 2 members, got {len(member_maps)}")
    n = {len(m) for m in member_maps}
    if len(n) != 1:
        raise ComparabilityError("members have different numbers of test subjects")
    subjects = range(n.pop()) if subjects is None else subjects
    regions = list(regions)
    return np.array([[min_pairwise_dice([m[s] for m in member_maps], r) for r in regions]
                     for s in subjects], dtype=np.float64).reshape(len(subjects), len(regions))


def region_stats(table: np.ndarray, regions: Sequence[int], family: str) -> list[RegionVariabilityStats]:
    return [RegionVariabilityStats(int(r), family, tuple(float(v) for v in table[:, j]))
            for j, r in enumerate(regions)]


def family_min_dice(manifest: FamilyManifest, subjects: Sequence[int] | None = None,
                    regions: Sequence[int] | None = None) -> list[RegionVariabilityStats]:
    """Per-region samples of per-subject min-Dice over the successful members."""
    ok = manifest.ok
    if len(ok) < 2:
        raise ArityError(f"{manifest.name}: need at least 2 successful members, got {len(ok)}")
    maps = [manifest.maps(r) for r in ok]
    if regions is None:
        regions = sorted(int(k) for k in manifest.data["dataset"]["label_table"])
    table = min_dice_table(maps, regions, subjects)
    return region_stats(table, regions, manifest.name)


@dataclass(frozen=True)
class RegionComparison:
    region: int
    verdict: Verdict
    raw_verdict: Verdict
    p_less_variable: float
    p_more_variable: float
    threshold: float
    mean_a: float
    mean_b: float


def _verdict(p_less_var: float, p_more_var: float, thr: float) -> Verdict:
    if p_less_var < thr:
        return Verdict.A_LESS_VARIABLE
    if p_more_var < thr:
        return Verdict.A_MORE_VARIABLE
    return Verdict.COMPARABLE


def compare_families(stats_a: Sequence[RegionVariabilityStats], stats_b: Sequence[RegionVariabilityStats],
                     alpha: float = 0.05) -> list[RegionComparison]:
    """Per-region one-sided Welch tests, Bonferroni-corrected over regions.

    Higher min-Dice means less variable, so "A less variable" is the test
    mean(a) > mean(b). ``raw_verdict`` uses the uncorrected alpha.
    """
    ra = [s.region for s in stats_a]
    rb = [s.region for s in stats_b]
    if sorted(ra) != sorted(rb) or len(set(ra)) != len(ra):
        raise ComparabilityError(f"region sets differ: {ra} vs {rb}")
    by_b = {s.region: s for s in stats_b}
    pairs = [(a, by_b[a.region]) for a in stats_a]
    p_less = [welch_t_test(a.values, b.values, "greater").p_value for a, b in pairs]
    p_more = [welch_t_test(a.values, b.values, "less").p_value for a, b in pairs]
    thr = bonferroni(p_less, alpha).threshold
    return [RegionComparison(a.region, _verdict(pl, pm, thr), _verdict(pl, pm, alpha), pl, pm, thr,
                             a.mean, b.mean)
            for (a, b), pl, pm in zip(pairs, p_less, p_more)]


def family_distinctness_test(a, b) -> TestResult:
    """Two-sided Welch test on the pooled per-subject-per-region min-Dice values.

    ``a`` and ``b`` are manifests or lists of RegionVariabilityStats.
    """
    def pooled(x):
        stats = family_min_dice(x) if isinstance(x, FamilyManifest) else x
        return [v for s in stats for v in s.values]
    return welch_t_test(pooled(a), pooled(b), "two_sided")


@dataclass(frozen=True)
class SpreadRow:
    epoch: int
    component: str
    min: float
    max: float
    mean: float
    std: float
    spike: bool


@dataclass
class SpreadReport:
    rows: list[SpreadRow]
    n_members: int
    n_epochs: int
    truncated: bool = False

    def column(self, component: str, stat: str = "std") -> np.ndarray:
        return np.array([getattr(r, stat) for r in self.rows if r.component == component])

    def spikes(self, component: str = "train_total") -> list[int]:
        return [r.epoch for r in self.rows if r.component == component and r.spike]


def _spike_flags(std: np.ndarray) -> np.ndarray:
    flags = np.zeros(len(std), dtype=bool)
    for e in range(SPIKE_WINDOW, len(std)):
        flags[e] = std[e] > SPIKE_FACTOR * float(np.median(std[e - SPIKE_WINDOW:e]))
    return flags


def loss_spread_report(source, *, epoch_cutoff: int | None = None) -> SpreadReport:
    """Across-member min/max/mean/std (ddof=1) per epoch and loss component.

    ``source`` is a manifest or a list of per-member histories. An epoch is
    flagged when its std exceeds twice the median std of the 5 epochs before
    it (the restart-spike detector).
    """
    if isinstance(source, FamilyManifest):
        histories = [source.losses(r) for r in source.ok]
    else:
        histories = [list(h) for h in source]
    if len(histories) < 2:
        raise ArityError(f"need at least 2 members with trajectories, got {len(histories)}")
    lengths = [len(h) for h in histories]
    n = min(lengths)
    truncated = len(set(lengths)) > 1
    if truncated:
        warnings.warn(f"trajectories have {sorted(set(lengths))} epochs; using the common prefix of {n}",
                      LossTruncationWarning, stacklevel=2)
    if epoch_cutoff is not None:
        n = min(n, epoch_cutoff)
    rows: list[SpreadRow] = []
    per_comp = {}
    for comp in LOSS_COMPONENTS:
        v = np.array([[getattr(h[e], comp) for e in range(n)] for h in histories])
        std = v.std(axis=0, ddof=1)
        # identical columns must report exactly zero, not mean-rounding residue
        std[np.all(v == v[:1], axis=0)] = 0.0
        per_comp[comp] = (v, std, _spike_flags(std))
    for e in range(n):
        for comp in LOSS_COMPONENTS:
            v, std, flags = per_comp[comp]
            col = v[:, e]
            mean = float(col[0]) if std[e] == 0.0 and col.min() == col.max() else float(col.mean())
            rows.append(SpreadRow(histories[0][e].epoch, comp, float(col.min()), float(col.max()),
                                  mean, float(std[e]), bool(flags[e])))
    return SpreadReport(rows, len(histories), n, truncated)


def write_spread_csv(path: Path, report: SpreadReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "component", "min", "max", "mean", "std", "spike"])
        for r in report.rows:
            w.writerow([r.epoch, r.component, repr(r.min), repr(r.max), repr(r.mean), repr(r.std), int(r.spike)])


def write_region_csv(path: Path, stats: Sequence[RegionVariabilityStats], label_table: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "name", "family", "n", "mean", "std", "min", "max"])
        for s in stats:
            name = (label_table or {}).get(s.region, (label_table or {}).get(str(s.region), ""))
            w.writerow([s.region, name, s.family, len(s.values), repr(s.mean), repr(s.std),
                        repr(min(s.values)), repr(max(s.values))])


def write_comparison_csv(path: Path, comps: Sequence[RegionComparison]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "verdict", "raw_verdict", "p_less_variable", "p_more_variable",
                    "threshold", "mean_a", "mean_b"])
        for c in comps:
            w.writerow([c.region, c.verdict.value, c.raw_verdict.value, repr(c.p_less_variable),
                        repr(c.p_more_variable), repr(c.threshold), repr(c.mean_a), repr(c.mean_b)])


def final_val_spread(manifest: FamilyManifest) -> float:
    """Std (ddof=1) of the last-epoch validation total across successful members."""
    finals = [r["final_val_total"] for r in manifest.ok]
    if len(finals) < 2:
        raise ArityError("need at least 2 successful members")
    return float(np.std(finals, ddof=1))


def params_pairwise_distinct(models: Sequence[Model]) -> bool:
    flats = [m.flat() for m in models]
    return all(not np.array_equal(flats[i], flats[j])
               for i in range(len(flats)) for j in range(i + 1, len(flats)))
