"""Tile PGM images side by side into one upscaled PNG for visual inspection.

usage: python scripts/pgm_montage.py out.png a.pgm b.pgm ...
"""

import struct
import sys
import zlib

import numpy as np

from amnesiac.attacks import read_pgm

SCALE = 6


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))


def montage(paths, out) -> None:
    tiles = [np.pad(np.kron(read_pgm(p), np.ones((SCALE, SCALE))), 4, constant_values=0.5) for p in paths]
    pixels = (np.concatenate(tiles, axis=1) * 255).astype(np.uint8)
    h, w = pixels.shape
    raw = b"".join(b"\x00" + row.tobytes() for row in pixels)
    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    with open(out, "wb") as f:
        f.write(b"\x89PNG\r\n\x1a\n" + _chunk(b"IHDR", header) + _chunk(b"IDAT", zlib.compress(raw)) + _chunk(b"IEND", b""))


if __name__ == "__main__":
    if len(sys.argv) < 3:
        sys.exit(__doc__)
    montage(sys.argv[2:], sys.argv[1])
