"""Datasets: synthetic segmentation grids, IDX (MNIST) files, on-disk format.

A dataset directory holds ``images.npy``, ``labels.npy`` and ``dataset.json``.
Splits are contiguous in index order (train, then val, then test) so every
family member sees exactly the same data in the same order.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from trainvar.rng import stream

FORMAT = "trainvar-dataset"
VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


@dataclass
class Dataset:
    task: str
    images: np.ndarray
    labels: np.ndarray
    n_train: int
    n_val: int
    n_test: int
    n_classes: int
    label_table: dict[int, str] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("segmentation", "classification"):
            raise DataError(f"unknown task {self.task!r}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if min(self.n_train, self.n_val, self.n_test) < 0 or \
                self.n_train + self.n_val + self.n_test > len(self.images):
            raise DataError("split sizes exceed the number of samples")
        if not self.label_table:
            self.label_table = {c: ("background" if c == 0 and self.task == "segmentation" else f"class_{c}")
                                for c in range(self.n_classes)}

    def _x(self, a, b):
        x = self.images[a:b]
        if x.dtype == np.uint8:
            x = x / 255.0
        x = np.asarray(x, dtype=np.float64)
        return x[:, None] if x.ndim == 3 else x

    @property
    def x_train(self):
        return self._x(0, self.n_train)

    @property
    def y_train(self):
        return self.labels[:self.n_train].astype(np.int64)

    @property
    def x_val(self):
        return self._x(self.n_train, self.n_train + self.n_val)

    @property
    def y_val(self):
        return self.labels[self.n_train:self.n_train + self.n_val].astype(np.int64)

    @property
    def test_slice(self) -> slice:
        a = self.n_train + self.n_val
        return slice(a, a + self.n_test)

    @property
    def x_test(self):
        s = self.test_slice
        return self._x(s.start, s.stop)

    @property
    def y_test(self):
        return self.labels[self.test_slice].astype(np.int64)

    def subset(self, n_train: int, n_val: int, n_test: int) -> Dataset:
        """Leading samples of each split, keeping the split boundaries."""
        tr = np.arange(min(n_train, self.n_train))
        va = self.n_train + np.arange(min(n_val, self.n_val))
        te = self.test_slice.start + np.arange(min(n_test, self.n_test))
        idx = np.concatenate([tr, va, te])
        return Dataset(self.task, self.images[idx], self.labels[idx], len(tr), len(va), len(te),
                       self.n_classes, dict(self.label_table), dict(self.meta))


def _paint_shape(labels, rng, cls, size):
    cy, cx = rng.integers(0, size, 2)
    r = int(rng.integers(max(2, size // 10), max(3, size // 4) + 1))
    yy, xx = np.mgrid[:size, :size]
    if rng.random() < 0.5:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    else:
        ry = int(rng.integers(max(1, r // 2), r + 1))
        mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= r)
    labels[mask] = cls


def make_segmentation_data(n_subjects: int, size: int = 32, n_classes: int = 4, seed: int = 0,
                           noise: float = 0.15, shapes_per_class: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Random discs and boxes on a background, one intensity level per class.

    Class levels are spread over [-0.5, 0.5] so inputs are roughly centred.

    Returns ``(images, labels)`` shaped (N, 1, size, size) and (N, size, size).
    """
    if n_subjects < 1 or size < 4 or n_classes < 2:
        raise DataError("need n_subjects >= 1, size >= 4 and n_classes >= 2")
    rng = stream(seed, "synthetic-segmentation")
    levels = np.linspace(-0.5, 0.5, n_classes)
    images = np.empty((n_subjects, 1, size, size))
    labels = np.zeros((n_subjects, size, size), dtype=np.int32)
    for s in range(n_subjects):
        lab = labels[s]
        for _ in range(shapes_per_class):
            for c in rng.permutation(np.arange(1, n_classes)):
                _paint_shape(lab, rng, int(c), size)
        images[s, 0] = levels[lab] + rng.normal(0.0, noise, (size, size))
    return images, labels


def synthetic_dataset(n_subjects: int = 100, size: int = 32, n_classes: int = 4, seed: int = 0,
                      val_fraction: float = 0.2, test_fraction: float = 0.2, **kw) -> Dataset:
    images, labels = make_segmentation_data(n_subjects, size, n_classes, seed, **kw)
    n_val = int(round(val_fraction * n_subjects))
    n_test = int(round(test_fraction * n_subjects))
    n_train = n_subjects - n_val - n_test
    if n_train < 1:
        raise DataError("no subjects left for training")
    meta = {"generator": "synthetic-segmentation", "size": size, "seed": seed, **kw}
    return Dataset("segmentation", images, labels, n_train, n_val, n_test, n_classes, meta=meta)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(ds: Dataset, out: Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    img_dtype = "|u1" if ds.images.dtype == np.uint8 else "<f8"
    np.save(out / "images.npy", np.ascontiguousarray(ds.images, dtype=img_dtype))
    np.save(out / "labels.npy", np.ascontiguousarray(ds.labels, dtype="<i4"))
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "task": ds.task,
        "n_classes": ds.n_classes,
        "split": {"train": ds.n_train, "val": ds.n_val, "test": ds.n_test},
        "label_table": {str(k): v for k, v in ds.label_table.items()},
        "meta": ds.meta,
        "sha256": {name: _sha256(out / name) for name in ("images.npy", "labels.npy")},
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path: Path, verify: bool = True) -> Dataset:
    path = Path(path)
    try:
        m = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no dataset.json") from None
    if m.get("format") != FORMAT or m.get("version") != VERSION:
        raise DataError(f"{path}: unsupported dataset format")
    if verify:
        for name, digest in m["sha256"].items():
            if _sha256(path / name) != digest:
                raise DataError(f"{path / name}: content hash mismatch")
    images = np.load(path / "images.npy")
    labels = np.load(path / "labels.npy")
    sp = m["split"]
    return Dataset(m["task"], images, labels, sp["train"], sp["val"], sp["test"], m["n_classes"],
                   {int(k): v for k, v in m["label_table"].items()}, m.get("meta", {}))


# IDX ----------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IdxFormatError(f"{path}: truncated or corrupt gzip stream ({exc})") from None
    return raw


def read_idx(path: Path, expect_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into a numpy array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if raw[0] or raw[1] or raw[2] not in _IDX_DTYPES:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head < need:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - head} of {need} bytes)")
    if len(raw) - head > need:
        raise IdxFormatError(f"{path}: {len(raw) - head - need} trailing bytes after payload")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path: Path, a: np.ndarray, compress: bool | None = None) -> None:
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    a = np.asarray(a)
    code = codes.get(a.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {a.dtype} has no IDX code")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    payload = header + a.astype(np.dtype(_IDX_DTYPES[code])).tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def read_mnist(images_path: Path, labels_path: Path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.dtype != np.uint8 or labels.dtype != np.uint8:
        raise IdxFormatError("MNIST files must hold unsigned bytes")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def mnist_dataset(images_path: Path, labels_path: Path, n_train: int | None = None,
                  n_val: int | None = None, n_test: int | None = None) -> Dataset:
    """MNIST-format files as a classification dataset (default split 70/10/20)."""
    images, labels = read_mnist(images_path, labels_path)
    n = len(images)
    if n_val is None:
        n_val = n // 10
    if n_test is None:
        n_test = n // 5
    if n_train is None:
        n_train = n - n_val - n_test
    return Dataset("classification", images, labels.astype(np.int32), n_train, n_val, n_test, 10,
                   meta={"source": "idx", "images": Path(images_path).name, "labels": Path(labels_path).name})
