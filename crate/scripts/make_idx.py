#!/usr/bin/env python3
"""Build the gzipped IDX files under data/ from the `mnist` and `fashion-mnist`
npm packages (run `npm pack mnist fashion-mnist` and extract them first).

usage: make_idx.py <mnist-package-dir> <fashion-mnist-package-dir> <out-dir>
"""
import gzip
import json
import os
import struct
import sys

PER_CLASS_FASHION = 400


def write_idx(path_prefix, images, labels):
    n = len(labels)
    with gzip.GzipFile(path_prefix + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(bytes(img))
    with gzip.GzipFile(path_prefix + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))


def main():
    mnist_dir, fashion_dir, out = sys.argv[1:4]
    images, labels = [], []
    for d in range(10):
        flat = json.load(open(os.path.join(mnist_dir, "src", "digits", f"{d}.json")))["data"]
        for i in range(len(flat) // 784):
            # pixels are stored as byte/255 rounded to 3 decimals; the rounding
            # error (< 0.13 of a byte) makes the inverse exact
            images.append([int(round(v * 255)) for v in flat[i * 784:(i + 1) * 784]])
            labels.append(d)
    write_idx(os.path.join(out, "mnist-10k"), images, labels)

    images, labels = [], []
    for d in range(10):
        rows = json.load(open(os.path.join(fashion_dir, "src", "clothes", f"{d}.json")))["data"]
        for row in rows[:PER_CLASS_FASHION]:
            images.append(row)
            labels.append(d)
    write_idx(os.path.join(out, "fashion-4k"), images, labels)


if __name__ == "__main__":
    main()
