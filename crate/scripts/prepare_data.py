#!/usr/bin/env python3
"""Build the IDX datasets shipped under data/.

MNIST: the `mnist` npm package (v1.1.0) bundles 10 000 real MNIST digits as
JSON arrays of 784 floats in [0, 1] (pixel / 255 rounded to 3 decimals).
They are converted back to uint8 and split per class: the last 100 digits
of every class form the test set, the rest the training set.

Foreign: 28x28 grayscale crops of the natural photographs bundled with
scikit-image. These are used as out-of-distribution inputs for the
per-class confidence evaluation.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/prepare_data.py --npm-package ./package --out data
"""

import argparse
import gzip
import json
import os
import struct

import numpy as np

TEST_PER_CLASS = 100
FOREIGN_COUNT = 1000


def write_idx_images(path, images):
    n, rows, cols = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def build_mnist(package_dir, out_dir):
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        with open(os.path.join(package_dir, "src", "digits", f"{digit}.json")) as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        imgs = np.clip(np.rint(flat.reshape(-1, 28, 28) * 255.0), 0, 255).astype(np.uint8)
        split = len(imgs) - TEST_PER_CLASS
        train_x.append(imgs[:split])
        train_y += [digit] * split
        test_x.append(imgs[split:])
        test_y += [digit] * TEST_PER_CLASS
    # Interleave classes deterministically so file order is not class-sorted.
    rng = np.random.default_rng(20240101)
    for xs, ys, prefix in ((train_x, train_y, "train"), (test_x, test_y, "t10k")):
        x = np.concatenate(xs)
        y = np.asarray(ys)
        order = rng.permutation(len(y))
        write_idx_images(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte.gz"), x[order])
        write_idx_labels(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte.gz"), y[order])
        print(prefix, x.shape, np.bincount(y))


def build_foreign(out_dir):
    import skimage.data as data
    from skimage.color import rgb2gray
    from skimage.transform import resize

    names = ["camera", "astronaut", "coffee", "chelsea", "coins", "moon", "page",
             "text", "rocket", "grass", "gravel", "brick", "clock", "hubble_deep_field",
             "immunohistochemistry", "colorwheel", "cell"]
    sources = []
    for name in names:
        img = getattr(data, name)()
        if img.ndim == 3:
            img = rgb2gray(img[..., :3])
        else:
            img = img.astype(np.float64) / 255.0
        sources.append(img)
    rng = np.random.default_rng(7)
    crops = np.empty((FOREIGN_COUNT, 28, 28), dtype=np.uint8)
    for i in range(FOREIGN_COUNT):
        img = sources[i % len(sources)]
        h, w = img.shape
        side = int(rng.integers(28, min(h, w) // 2 + 1))
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        patch = resize(img[top:top + side, left:left + side], (28, 28), anti_aliasing=True)
        crops[i] = np.clip(np.rint(patch * 255.0), 0, 255).astype(np.uint8)
    write_idx_images(os.path.join(out_dir, "foreign-images-idx3-ubyte.gz"), crops)
    print("foreign", crops.shape)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--npm-package", required=True)
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    mnist_dir = os.path.join(args.out, "mnist")
    foreign_dir = os.path.join(args.out, "foreign")
    os.makedirs(mnist_dir, exist_ok=True)
    os.makedirs(foreign_dir, exist_ok=True)
    build_mnist(args.npm_package, mnist_dir)
    build_foreign(foreign_dir)


if __name__ == "__main__":
    main()
