"""Build a small real-MNIST IDX dataset from the 5000-image sample bundled with mlxtend.

Usage::

    pip download --no-deps -d /tmp/wheels mlxtend
    python tools/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist5k

The sample holds 500 images per digit. 400 per digit go to the training files
and 100 per digit to the test files; each split is shuffled with a fixed seed
so any prefix of it is roughly class-balanced.
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def _write_gz(path, payload):
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
        f.write(payload)


def main(wheel, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as z:
        table = np.loadtxt(io.BytesIO(gzip.decompress(z.read(MEMBER))), delimiter=",")
    pixels = table[:, :784].astype(np.uint8)
    labels = table[:, 784].astype(np.uint8)

    rng = np.random.default_rng(20170105)
    train_idx, test_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.asarray(idx))
        count = len(idx)
        _write_gz(out / f"{name}-images-idx3-ubyte.gz",
                  struct.pack(">iiii", 2051, count, 28, 28) + pixels[idx].tobytes())
        _write_gz(out / f"{name}-labels-idx1-ubyte.gz",
                  struct.pack(">ii", 2049, count) + labels[idx].tobytes())
        print(name, count, np.bincount(labels[idx], minlength=10))


if __name__ == "__main__":
    main(*sys.argv[1:3])
