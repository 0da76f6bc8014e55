"""Minimal binary PGM (P5) reader/writer for 8-bit grayscale images."""

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8 arrays")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(image).tobytes())


def _tokens(data: bytes, count: int):
    # header tokens are whitespace separated; '#' starts a comment line
    out, i = [], 2
    while len(out) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            i = data.index(b"\n", i) + 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        out.append(int(data[i:j]))
        i = j
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    (w, h, maxval), start = _tokens(data, 3)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=start)
    return pixels.reshape(h, w).copy()
