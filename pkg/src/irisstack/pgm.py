"""Binary PGM (P5) reading and writing for 8-bit grayscale images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DatasetError


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {img.shape}")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8) if img.dtype != np.uint8 else img
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def _tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    values: list[int] = []
    pos = 2
    while len(values) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: malformed PGM header")
        values.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return values, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), start = _tokens(buf, 3, path)
    if maxval > 255:
        raise DatasetError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    raster = buf[start : start + width * height]
    if len(raster) != width * height:
        raise DatasetError(f"{path}: raster truncated")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
