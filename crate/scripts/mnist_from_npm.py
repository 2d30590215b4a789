#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: mnist_from_npm.py <package/src/digits> <out_dir>

Writes gzip-compressed train (8000) and test (2000) splits using the
standard MNIST file names. The split is a fixed seeded permutation.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def main():
    src, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        rows = flat.reshape(-1, 784)
        images.append(np.rint(rows * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(rows), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.RandomState(0).permutation(len(images))
    images, labels = images[perm], labels[perm]

    os.makedirs(out, exist_ok=True)
    splits = {"train": slice(0, 8000), "t10k": slice(8000, len(images))}
    for name, sl in splits.items():
        imgs, labs = images[sl], labels[sl]
        with gzip.GzipFile(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(imgs), 28, 28))
            f.write(imgs.tobytes())
        with gzip.GzipFile(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(labs)))
            f.write(labs.tobytes())
        print(name, imgs.shape, np.bincount(labs, minlength=10))


if __name__ == "__main__":
    main()
