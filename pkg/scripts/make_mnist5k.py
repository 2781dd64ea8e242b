"""Convert mlxtend's ``mnist_5k.csv.gz`` (784 pixel columns, then the label)
into gzipped IDX files, shuffled with a fixed seed so the class-sorted rows
spread evenly over the train/val/test splits.

Usage: python scripts/make_mnist5k.py path/to/mnist_5k.csv.gz tests/data/mnist5k
"""

import gzip
import sys
from pathlib import Path

import numpy as np

from trainvar.data import write_idx


def main(src: str, out: str) -> None:
    with gzip.open(src, "rt") as fh:
        a = np.loadtxt(fh, delimiter=",", dtype=np.int64)
    images = a[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = a[:, -1].astype(np.uint8)
    order = np.random.default_rng(20180518).permutation(len(labels))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(out_dir / "images-idx3-ubyte.gz", images[order])
    write_idx(out_dir / "labels-idx1-ubyte.gz", labels[order])


if __name__ == "__main__":
    main(*sys.argv[1:3])
