"""Build the small MNIST IDX fixture shipped in data/mnist-subset.

The source is the 5000-sample MNIST CSV distributed with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label).
A stratified split with a fixed seed gives 200 train and 100 test images per
digit, written as gzipped IDX files readable by ``lslu.data.load_mnist_idx``.

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz data/mnist-subset
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(header + array.astype(np.uint8).tobytes())


def main(src, dst, n_train=200, n_test=100, seed=0):
    rows = np.loadtxt(src, delimiter=",").astype(np.uint8)
    images, labels = rows[:, :-1].reshape(-1, 28, 28), rows[:, -1]
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = rng.permutation(np.flatnonzero(labels == k))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:n_train + n_test])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(dst / "train-images-idx3-ubyte.gz", images[train_idx], 0x803)
    write_idx(dst / "train-labels-idx1-ubyte.gz", labels[train_idx], 0x801)
    write_idx(dst / "t10k-images-idx3-ubyte.gz", images[test_idx], 0x803)
    write_idx(dst / "t10k-labels-idx1-ubyte.gz", labels[test_idx], 0x801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
