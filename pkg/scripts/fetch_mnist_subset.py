"""Build an MNIST IDX directory from the 5000-image subset shipped in the mlxtend wheel.

The wheel is fetched with ``pip download`` (or given with --wheel); nothing
from mlxtend is imported. Output: train-/t10k- images and labels as .gz IDX.
The split is stratified (``--test-per-class`` per digit) and the train part is
shuffled with a fixed seed, because the source rows are sorted by label.
"""
from __future__ import annotations

import argparse
import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from dvpvae.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_wheel(dest: Path) -> Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:", "-d", str(dest), "mlxtend"],
        check=True,
    )
    return Path(sorted(glob.glob(str(dest / "mlxtend-*.whl")))[-1])


def read_subset(wheel: Path) -> tuple[np.ndarray, np.ndarray]:
    with zipfile.ZipFile(wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    # 784 pixel columns followed by the label
    return table[:, :784].reshape(-1, 28, 28).astype(np.uint8), table[:, 784].astype(np.uint8)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--wheel", default=None, help="Existing mlxtend wheel; downloaded if omitted.")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = Path(args.wheel) if args.wheel else fetch_wheel(Path(tmp))
        images, labels = read_subset(wheel)

    rng = np.random.default_rng(args.seed)
    test_idx, train_idx = [], []
    for digit in range(10):
        idx = rng.permutation(np.flatnonzero(labels == digit))
        test_idx.append(idx[: args.test_per_class])
        train_idx.append(idx[args.test_per_class :])
    test_idx = np.sort(np.concatenate(test_idx))
    train_idx = rng.permutation(np.concatenate(train_idx))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train_idx], out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test_idx], out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"wrote {len(train_idx)} train and {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main()
