"""Convert the per-digit JSON files of the npm ``mnist`` package into IDX files.

The package ships 10,000 MNIST digits as intensities rounded to three
decimals; they are mapped back to bytes, shuffled with a fixed seed and split
into 9,000 train / 1,000 test samples written as gzip IDX files.

    python3 scripts/build_mnist_subset.py /path/to/mnist/src/digits data/mnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from nemon.data import write_idx

TEST_COUNT = 1000


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        img = np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(img)
        labels.append(np.full(img.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(labels.shape[0])
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": slice(TEST_COUNT, None),
        "t10k": slice(0, TEST_COUNT),
    }
    for name, sl in splits.items():
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", images[sl])
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", labels[sl])
        print(f"{name}: {images[sl].shape[0]} samples")


if __name__ == "__main__":
    main()
