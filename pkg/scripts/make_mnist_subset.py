"""Build MNIST-format IDX files from the 5,000-digit CSV shipped in the mlxtend wheel.

Full MNIST could not be fetched in the build environment; this real-digit
subset (500 per class) stands in for it.  Usage:

    pip download --no-deps mlxtend==0.24.0 -d /tmp/mlx
    python scripts/make_mnist_subset.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist

Writes train (400 per class) and t10k (100 per class) image/label pairs.
"""

from __future__ import annotations

import argparse
import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from gatedprune.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            raw = gzip.decompress(z.read(MEMBER))
    else:
        raw = gzip.decompress(source.read_bytes()) if source.suffix == ".gz" else source.read_bytes()
    return np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="mlxtend wheel or mnist_5k.csv[.gz]")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rows = read_rows(args.source)
    x = rows[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    y = rows[:, 784].astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    test = np.concatenate([rng.permutation(np.flatnonzero(y == c))[: args.test_per_class] for c in range(10)])
    mask = np.zeros(len(y), bool)
    mask[test] = True
    args.out.mkdir(parents=True, exist_ok=True)
    for split, sel in (("train", ~mask), ("t10k", mask)):
        idx = np.flatnonzero(sel)
        write_idx(args.out / f"{split}-images-idx3-ubyte.gz", x[idx])
        write_idx(args.out / f"{split}-labels-idx1-ubyte.gz", y[idx])
        print(f"{split}: {len(idx)} samples")
    return 0


if __name__ == "__main__":
    sys.exit(main())
