#!/usr/bin/env python3
"""Generate the synthetic shape-classification dataset in image-folder layout.

Example:
    python3 scripts/make_toy_dataset.py --out data/toy --train-per-class 500 \
        --test-per-class 100 --size 64 --seed 0
"""

import argparse

from nppc import toydata


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="dataset root directory")
    parser.add_argument("--train-per-class", type=int, default=500)
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--class-count", type=int, default=10)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--noise-sigma", type=float, default=0.10)
    args = parser.parse_args()
    toydata.make_toy_dataset(
        args.out,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        class_count=args.class_count,
        size=args.size,
        seed=args.seed,
        noise_sigma=args.noise_sigma,
    )
    print(f"wrote dataset under {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
