#!/usr/bin/env python3
"""Convert the JSON digit/clothing dumps shipped in the `mnist` and
`fashion-mnist` npm packages to IDX files.

usage: npm_to_idx.py MNIST_PKG FASHION_PKG OUT_DIR [--test N] [--seed S]

MNIST_PKG/src/digits/{0..9}.json hold flat [0,1] pixel arrays;
FASHION_PKG/src/clothes/{0..9}.json hold lists of 0..255 rows (empty rows
are skipped).
Writes mnist-{train,test}-{images,labels}.idx and fashion-{images,labels}.idx.
"""
import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28
PIX = SIDE * SIDE


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), SIDE, SIDE))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def load_mnist(pkg):
    out = []
    for label in range(10):
        flat = json.loads((Path(pkg) / "src" / "digits" / f"{label}.json").read_text())["data"]
        assert len(flat) % PIX == 0
        for i in range(0, len(flat), PIX):
            px = [min(255, max(0, round(v * 255))) for v in flat[i : i + PIX]]
            out.append((px, label))
    return out


def load_fashion(pkg):
    out = []
    for label in range(10):
        rows = json.loads((Path(pkg) / "src" / "clothes" / f"{label}.json").read_text())["data"]
        for r in rows:
            if not r:
                continue
            assert len(r) == PIX
            out.append(([int(v) for v in r], label))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("mnist_pkg")
    ap.add_argument("fashion_pkg")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000, help="MNIST images held out for testing")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    mnist = load_mnist(args.mnist_pkg)
    rng.shuffle(mnist)
    test, train = mnist[: args.test], mnist[args.test :]
    for name, part in (("train", train), ("test", test)):
        write_images(out / f"mnist-{name}-images.idx", [p for p, _ in part])
        write_labels(out / f"mnist-{name}-labels.idx", [l for _, l in part])

    fashion = load_fashion(args.fashion_pkg)
    rng.shuffle(fashion)
    write_images(out / "fashion-images.idx", [p for p, _ in fashion])
    write_labels(out / "fashion-labels.idx", [l for _, l in fashion])
    print(f"mnist train={len(train)} test={len(test)} fashion={len(fashion)} -> {out}")


if __name__ == "__main__":
    main()
