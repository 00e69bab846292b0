#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into IDX files.

Usage: mnist_npm_to_idx.py <package-dir> <out-dir>

The npm package stores each class as a flat JSON array of 28x28 pixels in
[0, 1] (three decimals). Pixels are rounded back to u8 and written as a
gzip-compressed IDX image/label pair, class-major order.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    images, labels = bytearray(), bytearray()
    count = 0
    for digit in range(10):
        data = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        n = len(data) // 784
        images.extend(min(255, max(0, round(v * 255))) for v in data)
        labels.extend([digit] * n)
        count += n
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        f.write(images)
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, count))
        f.write(labels)
    print(f"wrote {count} digits to {out}")


if __name__ == "__main__":
    main()
