#!/usr/bin/env python3
"""Build IDX-format MNIST files from the `mnist` npm package.

The npm bundle ships 10,000 MNIST digits as JSON (pixel values rounded to
three decimals in [0, 1]); each value is mapped back to its byte with
round(v * 255), which is exact at that precision. Output files use the
standard training-set names so the loader finds them without extra flags:

    <out>/train-images-idx3-ubyte
    <out>/train-labels-idx1-ubyte

Usage: scripts/fetch_mnist.py [OUT_DIR]   (default: data/mnist)
"""
import json
import os
import random
import struct
import subprocess
import sys
import tarfile
import tempfile

ROWS = COLS = 28


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else os.path.join("data", "mnist")
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            path = os.path.join(tmp, "package", "src", "digits", f"{digit}.json")
            with open(path) as fh:
                flat = json.load(fh)["data"]
            n = len(flat) // (ROWS * COLS)
            for k in range(n):
                pixels = flat[k * ROWS * COLS:(k + 1) * ROWS * COLS]
                samples.append((bytes(min(255, max(0, round(v * 255))) for v in pixels), digit))
    # interleave classes with a fixed shuffle so file order carries no label structure
    random.Random(0).shuffle(samples)
    with open(os.path.join(out, "train-images-idx3-ubyte"), "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(samples), ROWS, COLS))
        for pixels, _ in samples:
            fh.write(pixels)
    with open(os.path.join(out, "train-labels-idx1-ubyte"), "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(samples)))
        fh.write(bytes(label for _, label in samples))
    print(f"wrote {len(samples)} digits to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
