"""Build the bundled MNIST subset from the npm ``mnist`` package.

The package ships 10,000 real MNIST digits as JSON (pixels stored as v/255
rounded to three decimals, which is enough to recover the original bytes).
We shuffle them with a fixed seed and write gzipped IDX pairs:

    train  7500   t10k  2000   public  500

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/mnist_from_npm.py package/src/digits data/mnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from sidp.data import Dataset, save_idx

SPLITS = (("train", 7500), ("t10k", 2000), ("public", 500))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=20201)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        x = np.rint(flat * 255.0).reshape(-1, 28, 28)
        images.append(x)
        labels.append(np.full(len(x), digit))
    images = np.concatenate(images) / 255.0
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    for name, n in SPLITS:
        ds = Dataset(images[start : start + n], labels[start : start + n])
        save_idx(ds, args.out_dir / f"{name}-images-idx3-ubyte.gz",
                 args.out_dir / f"{name}-labels-idx1-ubyte.gz")
        print(name, len(ds), np.bincount(ds.labels, minlength=10))
        start += n
    print("unused", len(labels) - start)


if __name__ == "__main__":
    main()
