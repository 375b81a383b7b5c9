"""Binary container for precomputed contextual embeddings.

Layout (all integers little-endian)::

    magic         8 bytes   b"CT2IEMB1"
    header_len    uint32
    header        header_len bytes of UTF-8 JSON:
                  {"provider": str, "dim": int, "count": int, "dtype": "<f4"}
    count entries, each:
        key       32 bytes  sha256 of the token ids encoded as little-endian int64
        length    uint32    T
        values    dim * T little-endian float32, row-major (dim, T)

The key covers only the real (unpadded) tokens of a caption.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"CT2IEMB1"
_DTYPE = np.dtype("<f4")


class EmbeddingFileError(ValueError):
    pass


def sequence_key(tokens: Iterable[int]) -> bytes:
    return hashlib.sha256(np.asarray(list(tokens), dtype="<i8").tobytes()).digest()


def write_embedding_file(path: str | Path, provider: str, dim: int,
                         entries: Mapping[Sequence[int], np.ndarray]) -> Path:
    """``entries`` maps a token-id sequence to its ``(dim, T)`` embedding matrix."""
    path = Path(path)
    header = json.dumps({"provider": provider, "dim": int(dim), "count": len(entries),
                         "dtype": _DTYPE.str}, sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for tokens, values in entries.items():
            values = np.asarray(values, dtype=_DTYPE)
            if values.shape != (dim, len(tokens)):
                raise EmbeddingFileError(
                    f"entry for {list(tokens)} has shape {values.shape}, expected {(dim, len(tokens))}")
            fh.write(sequence_key(tokens))
            fh.write(struct.pack("<I", len(tokens)))
            fh.write(np.ascontiguousarray(values).tobytes())
    return path


def read_embedding_file(path: str | Path) -> tuple[dict, dict[bytes, np.ndarray]]:
    """Return ``(header, {key: (dim, T) float32 array})``."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise EmbeddingFileError(f"{path}: not an embedding file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen].decode())
    dim = int(header["dim"])
    off = 12 + hlen
    table = {}
    for _ in range(int(header["count"])):
        key = data[off:off + 32]
        (length,) = struct.unpack_from("<I", data, off + 32)
        off += 36
        n = dim * length * _DTYPE.itemsize
        if off + n > len(data):
            raise EmbeddingFileError(f"{path}: truncated entry")
        table[key] = np.frombuffer(data, dtype=_DTYPE, count=dim * length, offset=off).reshape(dim, length).copy()
        off += n
    if off != len(data):
        raise EmbeddingFileError(f"{path}: {len(data) - off} trailing bytes")
    return header, table
