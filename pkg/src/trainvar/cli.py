"""``trainvar`` command line: data, family training, analysis, augmentation, reports.

Exit codes: 0 ok, 1 unexpected failure, 2 usage/config error, 3 data or
manifest error, 4 analysis error (too few members, mismatched families),
5 output already exists (use --force), 6 every family member failed.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from trainvar import __version__
from trainvar.augment import AugmentError, augmentation_sweep, read_records, records_from_family, \
    synthetic_records, write_records
from trainvar.config import ConfigError, ExperimentConfig, load_config
from trainvar.data import DataError, Dataset, load_dataset, mnist_dataset, save_dataset, synthetic_dataset
from trainvar.lab import (
    Family,
    FamilyManifest,
    ManifestError,
    compare_families,
    family_distinctness_test,
    family_min_dice,
    final_val_spread,
    loss_spread_report,
    run_family,
    write_comparison_csv,
    write_region_csv,
    write_spread_csv,
)
from trainvar.mca import McaConfigError
from trainvar.nn.layers import ConfigError as NetConfigError
from trainvar.seg import ArityError, ComparabilityError, SegmentationMap, region_volumes
from trainvar.stats import StatsError

log = logging.getLogger("trainvar")

EXIT_OK, EXIT_UNEXPECTED, EXIT_USAGE, EXIT_DATA, EXIT_ANALYSIS, EXIT_EXISTS, EXIT_TRAINING = range(7)


class OutputExists(Exception):
    pass


class TrainingFailed(Exception):
    pass


_CATEGORIES = [
    ((ConfigError, NetConfigError, McaConfigError), "config", EXIT_USAGE),
    ((OutputExists, FileExistsError), "exists", EXIT_EXISTS),
    ((ArityError, ComparabilityError, StatsError), "analysis", EXIT_ANALYSIS),
    ((DataError, ManifestError, AugmentError, FileNotFoundError), "data", EXIT_DATA),
    ((TrainingFailed,), "training", EXIT_TRAINING),
]


def _prepare_out(out: Path, force: bool, marker: str | None = None) -> Path:
    """Refuse to write into an existing output unless --force."""
    out = Path(out)
    target = out / marker if marker else out
    if target.exists() and (marker or any(out.iterdir())):
        if not force:
            raise OutputExists(f"{target} already exists; pass --force to overwrite")
        if not marker:
            shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()


def _dataset(cfg: ExperimentConfig, override: str | None = None) -> Dataset:
    if override:
        return load_dataset(Path(override))
    ds = dict(cfg.dataset)
    kind = ds.pop("kind")
    if kind == "directory":
        return load_dataset(cfg.resolve(ds["path"]))
    if kind == "mnist":
        return mnist_dataset(cfg.resolve(ds["images"]), cfg.resolve(ds["labels"]),
                             ds.get("n_train"), ds.get("n_val"), ds.get("n_test"))
    allowed = ("n_subjects", "size", "n_classes", "seed", "noise", "shapes_per_class", "val_fraction",
               "test_fraction")
    extra = sorted(set(ds) - set(allowed))
    if extra:
        raise ConfigError(f"dataset.{extra[0]}", "not valid for synthetic datasets")
    return synthetic_dataset(**ds)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if cfg.dataset["kind"] != "synthetic":
        raise ConfigError("dataset.kind", "gen-data only generates synthetic datasets")
    out = _prepare_out(args.out, args.force, "dataset.json")
    ds = _dataset(cfg)
    save_dataset(ds, out)
    print(f"wrote {len(ds.images)} subjects ({ds.n_train}/{ds.n_val}/{ds.n_test}) to {out}")
    return EXIT_OK


def cmd_ingest_mnist(args) -> int:
    ds = mnist_dataset(Path(args.images), Path(args.labels), args.n_train, args.n_val, args.n_test)
    out = _prepare_out(args.out, args.force, "dataset.json")
    save_dataset(ds, out)
    print(f"ingested {len(ds.images)} images ({ds.n_train}/{ds.n_val}/{ds.n_test}) into {out}")
    return EXIT_OK


def _family(cfg: ExperimentConfig) -> Family:
    fam = dict(cfg.family)
    kind = fam.pop("kind")
    spec, train_cfg = cfg.network_spec(), cfg.train_config()
    kw = {}
    if kind == "mca":
        kw["n"] = fam.get("members", 5)
        kw["precision"] = fam.get("precision", 24)
        if "seeds" in fam:
            kw["seeds"] = fam["seeds"]
    elif kind == "random_seed":
        kw["seeds"] = fam.get("seeds", list(range(fam.get("members", 10))))
    elif kind == "weight_init" and "schemes" in fam:
        kw["schemes"] = fam["schemes"]
    return Family.build(kind, spec, train_cfg, **kw)


def cmd_train_family(args) -> int:
    cfg = _config(args)
    family = _family(cfg)
    ds = _dataset(cfg, args.dataset)
    if ds.task == "classification" and cfg.network.get("preset") != "mnist":
        raise ConfigError("network.preset", "classification datasets need the mnist preset")
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise OutputExists(f"{out / 'manifest.json'} already exists; pass --force to overwrite")
    cutoff = args.epoch_cutoff or cfg.analysis.get("epoch_cutoff")
    manifest = run_family(family, ds, out, jobs=args.jobs, epochs=cutoff, force=args.force, name=cfg.name)
    ok = len(manifest.ok)
    print(f"{manifest.name}: {ok}/{len(manifest.records)} members trained; manifest {out / 'manifest.json'}")
    if ok == 0:
        raise TrainingFailed("every member failed")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    alpha = args.alpha if args.alpha is not None else cfg.analysis.get("alpha", 0.05)
    cutoff = args.epoch_cutoff or cfg.analysis.get("epoch_cutoff")
    regions = cfg.analysis.get("regions")
    manifests = [FamilyManifest.load(Path(p)) for p in args.manifests]
    names = [m.name for m in manifests]
    if len(set(names)) != len(names):
        names = [f"{n}_{i}" for i, n in enumerate(names)]
    out = _prepare_out(args.out, args.force, "summary.json")
    summary: dict = {"alpha": alpha, "epoch_cutoff": cutoff, "families": {}, "comparisons": []}
    stats = {}
    for name, m in zip(names, manifests):
        spread = loss_spread_report(m, epoch_cutoff=cutoff)
        write_spread_csv(out / f"{name}_loss_spread.csv", spread)
        fam = {"kind": m.kind.value, "members_ok": len(m.ok), "members_failed": len(m.records) - len(m.ok),
               "final_val_total_std": final_val_spread(m), "spike_epochs": spread.spikes("train_total")}
        if m.data["dataset"]["task"] == "segmentation":
            stats[name] = family_min_dice(m, regions=regions)
            write_region_csv(out / f"{name}_min_dice.csv", stats[name], m.data["dataset"]["label_table"])
            fam["mean_min_dice"] = {s.region: s.mean for s in stats[name]}
        else:
            fam["test_accuracy"] = {r["member_id"]: r["test_accuracy"] for r in m.ok}
        summary["families"][name] = fam
    for a, b in itertools.combinations(stats, 2):
        comps = compare_families(stats[a], stats[b], alpha)
        write_comparison_csv(out / f"{a}_vs_{b}_comparison.csv", comps)
        t = family_distinctness_test(stats[a], stats[b])
        summary["comparisons"].append({
            "a": a, "b": b,
            "verdicts": {str(c.region): c.verdict.value for c in comps},
            "raw_verdicts": {str(c.region): c.raw_verdict.value for c in comps},
            "distinctness": {"t": t.statistic, "p": t.p_value, "dof": t.dof, "flags": sorted(t.flags)},
        })
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_json_default) + "\n")
    print(f"analysed {len(manifests)} families into {out}")
    return EXIT_OK


def _json_default(o):
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def _family_records(manifest: FamilyManifest, ds: Dataset, seed: int):
    if ds.task != "segmentation":
        raise ConfigError("dataset", "family-derived records need a segmentation dataset")
    table = ds.label_table
    true = np.array([region_volumes(SegmentationMap(lab, table)) for lab in ds.labels[ds.test_slice]])
    members = [np.array([region_volumes(mp) for mp in manifest.maps(r)]) for r in manifest.ok]
    regions = [j for j, k in enumerate(table) if k != 0]
    names = [table[k] for k in table if k != 0]
    return records_from_family(members, true, seed=seed, regions=regions), names


def cmd_augment(args) -> int:
    cfg = _config(args)
    au = cfg.augment
    if args.records:
        records, names = read_records(Path(args.records))
    elif args.manifest:
        ds = _dataset(cfg, args.dataset)
        records, names = _family_records(FamilyManifest.load(Path(args.manifest)), ds, args.seed)
    else:
        records, names = synthetic_records(seed=args.seed), None
    available = min(len(r.repetitions) for r in records)
    k_max = au.get("k_max", available)
    if k_max > available:
        raise ConfigError("augment.k_max", f"{k_max} exceeds the {available} available repetitions")
    out = _prepare_out(args.out, args.force, "sweep.json")
    if not args.records:
        write_records(out / "records.csv", records, names)
    result = augmentation_sweep(records, k_max, au.get("model", "forest"), au.get("seeds", range(5)),
                                n_trees=au.get("n_trees", 100), max_depth=au.get("max_depth", 8),
                                ridge=au.get("ridge", 1e-6), test_fraction=au.get("test_fraction", 0.2))
    result.write(out)
    s = result.summary()
    print(f"slope {s['slope']:.6g}, pearson r {s['pearson_r']:.4f} (p={s['pearson_p']:.3g}); wrote {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = _prepare_out(args.out, args.force, "report.json")
    report, lines = [], ["| family | member | status | final val total | test acc | seconds |",
                         "|---|---|---|---|---|---|"]
    for path in args.manifests:
        m = FamilyManifest.load(Path(path))
        bad = m.verify()
        report.append({"name": m.name, "kind": m.kind.value, "engine_version": m.data["engine_version"],
                       "members": [{k: r.get(k) for k in ("member_id", "status", "error", "final_val_total",
                                                          "test_accuracy", "duration_s")} for r in m.records],
                       "hash_mismatches": bad})
        for r in m.records:
            acc = r.get("test_accuracy")
            val = r.get("final_val_total")
            lines.append(f"| {m.name} | {r['member_id']} | {r['status']} | "
                         f"{'' if val is None else f'{val:.5f}'} | {'' if acc is None else f'{acc:.4f}'} | "
                         f"{r.get('duration_s', 0):.1f} |")
        if bad:
            log.warning("%s: %d files differ from their recorded hashes", m.name, len(bad))
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trainvar", description="Training-variability experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="experiment TOML file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    sp = sub.add_parser("gen-data", help="write a synthetic segmentation dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("ingest-mnist", help="convert IDX image/label files to a dataset directory")
    sp.add_argument("images")
    sp.add_argument("labels")
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-val", type=int)
    sp.add_argument("--n-test", type=int)
    common(sp, config=False)
    sp.set_defaults(func=cmd_ingest_mnist)

    sp = sub.add_parser("train-family", help="train every member of a perturbation family")
    common(sp)
    sp.add_argument("--dataset", help="dataset directory (overrides the config's dataset section)")
    sp.add_argument("--jobs", type=int, default=1, help="members trained concurrently")
    sp.add_argument("--epoch-cutoff", type=int, help="stop every member after N epochs")
    sp.set_defaults(func=cmd_train_family)

    sp = sub.add_parser("analyze", help="min-Dice, family comparisons and loss spread")
    sp.add_argument("manifests", nargs="+")
    common(sp)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--epoch-cutoff", type=int, help="only report the first N epochs of loss spread")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("augment", help="MAE-vs-repetitions sweep")
    sp.add_argument("records", nargs="?", help="SubjectRecords CSV")
    common(sp)
    sp.add_argument("--manifest", help="build records from a segmentation family instead")
    sp.add_argument("--dataset", help="dataset directory for --manifest")
    sp.add_argument("--seed", type=int, default=0, help="seed for generated records and targets")
    sp.set_defaults(func=cmd_augment)

    sp = sub.add_parser("report", help="tabulate members, status and hashes of manifests")
    sp.add_argument("manifests", nargs="+")
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    if getattr(args, "epoch_cutoff", None) is not None and args.epoch_cutoff < 1:
        parser.error("--epoch-cutoff must be at least 1")
    try:
        return args.func(args)
    except Exception as exc:
        for types, label, code in _CATEGORIES:
            if isinstance(exc, types):
                print(f"error [{label}]: {exc}", file=sys.stderr)
                return code
        log.exception("unexpected failure")
        print(f"error [internal]: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
