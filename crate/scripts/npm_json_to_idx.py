#!/usr/bin/env python3
"""Convert the `mnist` and `fashion-mnist` npm packages into IDX files.

Usage:
    npm pack mnist fashion-mnist
    tar xzf mnist-1.1.0.tgz && mv package mnist-pkg
    tar xzf fashion-mnist-1.1.0.tgz && mv package fmnist-pkg
    python3 scripts/npm_json_to_idx.py mnist-pkg fmnist-pkg data/

Writes:
    mnist-train-{images,labels}.idx   8004 digits (4 of every 5 per class)
    mnist-test-{images,labels}.idx    1996 digits (the rest)
    fmnist-test-{images,labels}.idx   2000 clothing images (last 200 per class)
"""
import json
import os
import struct
import sys

import numpy as np


def write_idx(prefix, images, labels):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = images.shape[0]
    with open(prefix + "-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.reshape(n, 784).tobytes())
    with open(prefix + "-labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


def to_bytes(rows, scale):
    arr = np.asarray(rows, dtype=np.float64) * scale
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def main(mnist_dir, fmnist_dir, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(20230101)

    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        with open(os.path.join(mnist_dir, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        # pixels are stored as floats in [0, 1] rounded to three decimals
        rows = to_bytes(flat, 255.0).reshape(-1, 784)
        for j, row in enumerate(rows):
            if j % 5 == 4:
                test_x.append(row)
                test_y.append(digit)
            else:
                train_x.append(row)
                train_y.append(digit)
    for prefix, xs, ys in (("mnist-train", train_x, train_y), ("mnist-test", test_x, test_y)):
        order = rng.permutation(len(xs))
        write_idx(os.path.join(out_dir, prefix), np.stack(xs)[order], np.asarray(ys)[order])

    fx, fy = [], []
    for cls in range(10):
        with open(os.path.join(fmnist_dir, "src", "clothes", f"{cls}.json")) as f:
            rows = json.load(f)["data"]
        # a few rows in the package are empty
        rows = [r for r in rows if len(r) == 784]
        for row in rows[-200:]:
            fx.append(to_bytes(row, 1.0))
            fy.append(cls)
    order = rng.permutation(len(fx))
    write_idx(os.path.join(out_dir, "fmnist-test"), np.stack(fx)[order], np.asarray(fy)[order])


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])
