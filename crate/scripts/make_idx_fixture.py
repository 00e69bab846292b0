"""Writes the 2-image 3x2 IDX fixture used by the data-io tests."""
import struct
import sys
from pathlib import Path

out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures")
out.mkdir(parents=True, exist_ok=True)
pixels = [[0, 255, 17, 128, 64, 1], [200, 3, 99, 0, 255, 42]]
labels = [1, 0]
with open(out / "tiny-images-idx3-ubyte", "wb") as f:
    f.write(struct.pack(">IIII", 0x803, len(pixels), 3, 2))
    for img in pixels:
        f.write(bytes(img))
with open(out / "tiny-labels-idx1-ubyte", "wb") as f:
    f.write(struct.pack(">II", 0x801, len(labels)))
    f.write(bytes(labels))
