"""Minimal binary PGM (P5) and PPM (P6) readers/writers.

These formats keep every artifact trivially inspectable and byte-stable,
which the dataset determinism guarantee relies on.
"""

from __future__ import annotations

import numpy as np


def _read_header(f, magic):
    if f.readline().strip() != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(v) for v in text.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return w, h


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM expects a 2-D array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(image.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).copy()


def write_ppm(path, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PPM expects an (H, W, 3) array")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()
