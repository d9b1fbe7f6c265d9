"""File formats: key-value text, binary images/sinograms, PGM export."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"LRIM"
SINO_MAGIC = b"LRSG"
_VERSION = 1


def read_kv(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def _write_array(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HII", _VERSION, *arr.shape))
        fh.write(arr.astype("<f4").tobytes())


def _read_array(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version, h, w = struct.unpack("<HII", fh.read(10))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        data = np.frombuffer(fh.read(4 * h * w), "<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(h, w).astype(np.float64)


def write_image(path, img: np.ndarray) -> None:
    _write_array(path, IMAGE_MAGIC, img)


def read_image(path) -> np.ndarray:
    return _read_array(path, IMAGE_MAGIC)


def write_sinogram(path, sino: np.ndarray) -> None:
    _write_array(path, SINO_MAGIC, sino)


def read_sinogram(path) -> np.ndarray:
    return _read_array(path, SINO_MAGIC)


def write_pgm(path, img: np.ndarray, window: tuple[float, float] = (0.0, 1.0)) -> None:
    """8-bit binary PGM, values clipped to ``window``."""
    lo, hi = window
    scaled = np.clip((np.asarray(img) - lo) / (hi - lo), 0.0, 1.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0]))
        fh.write(pix.tobytes())
