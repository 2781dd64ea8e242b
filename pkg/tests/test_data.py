import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from trainvar.data import (
    DataError, IdxFormatError, load_dataset, mnist_dataset, read_idx, read_mnist, save_dataset, synthetic_dataset,
    write_idx,
)

MNIST5K = Path(__file__).parent / "data" / "mnist5k"


def test_idx_header_for_ten_digits(tmp_path):
    imgs = np.arange(10 * 28 * 28, dtype=np.uint8).reshape(10, 28, 28)
    write_idx(tmp_path / "i", imgs)
    raw = (tmp_path / "i").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (10, 28, 28)
    assert len(raw) == 16 + 10 * 28 * 28
    assert np.array_equal(read_idx(tmp_path / "i"), imgs)


@pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", "<i4", "f4", "f8"])
def test_idx_round_trip(tmp_path, dtype):
    a = (np.arange(24) - 5).astype(dtype).reshape(2, 3, 4)
    write_idx(tmp_path / "a.gz", a)
    assert (tmp_path / "a.gz").read_bytes()[:2] == b"\x1f\x8b"
    back = read_idx(tmp_path / "a.gz")
    assert back.shape == a.shape and np.array_equal(back, a)


def test_idx_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"\x01\x00\x08\x01" + struct.pack(">I", 3) + b"abc")
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 5) + b"abc")
    with pytest.raises(IdxFormatError, match="truncated payload"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x03\x00")
    with pytest.raises(IdxFormatError, match="truncated header"):
        read_idx(p)
    p.write_bytes(b"\x00\x00\x08\x01" + struct.pack(">I", 2) + b"abc")
    with pytest.raises(IdxFormatError, match="trailing"):
        read_idx(p)
    p.write_bytes(gzip.compress(b"\x00\x00\x08\x01" + struct.pack(">I", 3) + b"abc")[:-6])
    with pytest.raises(IdxFormatError, match="gzip"):
        read_idx(p)


def test_mnist_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((3, 28, 28), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(IdxFormatError, match="3 images but 2 labels"):
        read_mnist(tmp_path / "i", tmp_path / "l")
    with pytest.raises(IdxFormatError, match="magic"):
        read_mnist(tmp_path / "l", tmp_path / "i")


def test_bundled_mnist_subset():
    ds = mnist_dataset(MNIST5K / "images-idx3-ubyte.gz", MNIST5K / "labels-idx1-ubyte.gz")
    assert (ds.n_train, ds.n_val, ds.n_test) == (3500, 500, 1000)
    assert ds.x_train.shape == (3500, 1, 28, 28) and 0 <= ds.x_train.min() and ds.x_train.max() <= 1
    assert set(np.unique(ds.y_test)) == set(range(10))


def test_synthetic_dataset_is_deterministic():
    a = synthetic_dataset(12, size=16, seed=3)
    b = synthetic_dataset(12, size=16, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(synthetic_dataset(12, size=16, seed=4).labels, a.labels)
    assert a.n_train + a.n_val + a.n_test == 12
    assert set(np.unique(a.labels)) <= {0, 1, 2, 3}


def test_split_partitions_subjects():
    ds = synthetic_dataset(20, size=8, seed=0)
    assert len(ds.x_train) + len(ds.x_val) + len(ds.x_test) == 20
    joined = np.concatenate([ds.y_train, ds.y_val, ds.y_test])
    assert np.array_equal(joined, ds.labels)


def test_save_load_round_trip_and_tamper_check(tmp_path):
    ds = synthetic_dataset(6, size=8, seed=2)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images) and back.label_table == ds.label_table
    arr = np.load(tmp_path / "labels.npy")
    arr[0, 0, 0] = 3 - arr[0, 0, 0]
    np.save(tmp_path / "labels.npy", arr)
    with pytest.raises(DataError, match="hash"):
        load_dataset(tmp_path)
    load_dataset(tmp_path, verify=False)


def test_dataset_validation():
    with pytest.raises(DataError):
        synthetic_dataset(2, size=8, val_fraction=0.5, test_fraction=0.5)
    with pytest.raises(DataError):
        synthetic_dataset(5, size=2)
