"""Embedding file: "IREM", u32 version, u32 count, u32 dim, then per record
u16 id length, UTF-8 id and dim little-endian float32 values."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CheckpointError

MAGIC = b"IREM"
VERSION = 1


def dumps(ids: Sequence[str], vectors: np.ndarray) -> bytes:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise CheckpointError(f"{len(ids)} ids do not match vectors of shape {vectors.shape}")
    parts = [MAGIC, struct.pack("<III", VERSION, len(ids), vectors.shape[1])]
    for sid, vec in zip(ids, vectors):
        raw = sid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"id too long for the embedding file: {sid[:40]}...")
        parts += [struct.pack("<H", len(raw)), raw, vec.tobytes()]
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> tuple[list[str], np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an embedding file (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{source}: truncated header")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported embedding file version {version}")
    pos = 16
    ids, vectors = [], np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        if pos + 2 > len(blob):
            raise CheckpointError(f"{source}: truncated at record {i}")
        (n,) = struct.unpack_from("<H", blob, pos)
        end = pos + 2 + n + 4 * dim
        if end > len(blob):
            raise CheckpointError(f"{source}: truncated at record {i}")
        ids.append(blob[pos + 2 : pos + 2 + n].decode("utf-8"))
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=dim, offset=pos + 2 + n)
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    if len(set(ids)) != len(ids):
        raise CheckpointError(f"{source}: duplicate ids")
    return ids, vectors


def save(path, ids, vectors) -> None:
    Path(path).write_bytes(dumps(ids, vectors))


def load(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read embedding file {path}: {exc.strerror}") from exc
    return loads(blob, str(path))


def as_mapping(path) -> dict[str, np.ndarray]:
    ids, vectors = load(path)
    return dict(zip(ids, vectors))
