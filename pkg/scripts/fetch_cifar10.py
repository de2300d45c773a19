#!/usr/bin/env python3
"""Download CIFAR-10 and convert it to the image-folder layout the pipeline reads.

The training pipeline never assumes this dataset; it is a convenience for running
on a standard 10-class 32x32 corpus instead of the synthetic generator.

Example:
    python3 scripts/fetch_cifar10.py --out data/cifar10
"""

import argparse
import pickle
import tarfile
import urllib.request
from pathlib import Path

import numpy as np
from PIL import Image

URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
LABELS = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]


def write_batch(batch: dict, split_dir: Path, counters: dict) -> None:
    data = batch[b"data"].reshape(-1, 3, 32, 32)
    for row, label in zip(data, batch[b"labels"]):
        name = LABELS[label]
        class_dir = split_dir / name
        class_dir.mkdir(parents=True, exist_ok=True)
        index = counters[name] = counters.get(name, 0) + 1
        img = Image.fromarray(np.transpose(row, (1, 2, 0)))
        img.save(class_dir / f"{name}_{index:05d}.png")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="dataset root directory")
    parser.add_argument("--archive", help="use an existing tar.gz instead of downloading")
    args = parser.parse_args()
    out = Path(args.out)
    archive = Path(args.archive) if args.archive else out / "cifar-10-python.tar.gz"
    if not archive.exists():
        archive.parent.mkdir(parents=True, exist_ok=True)
        print(f"downloading {URL}")
        urllib.request.urlretrieve(URL, archive)
    with tarfile.open(archive, "r:gz") as tar:
        counters_train: dict = {}
        counters_test: dict = {}
        for member in tar.getmembers():
            base = Path(member.name).name
            if base.startswith("data_batch"):
                batch = pickle.load(tar.extractfile(member), encoding="bytes")
                write_batch(batch, out / "train", counters_train)
            elif base == "test_batch":
                batch = pickle.load(tar.extractfile(member), encoding="bytes")
                write_batch(batch, out / "test", counters_test)
    print(f"wrote dataset under {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
