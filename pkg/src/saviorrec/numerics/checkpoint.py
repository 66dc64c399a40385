"""Reader/writer for the ``SAVIOR-TENSORS v1`` binary tensor format.

Layout after the header line ``SAVIOR-TENSORS v1\\n``, repeated until EOF::

    uint32 name_length | name (utf-8) | uint32 rank | uint64 * rank shape | float64 * prod(shape)

All integers and floats are little-endian.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

HEADER = b"SAVIOR-TENSORS v1\n"


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [HEADER]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(HEADER):
        raise ValueError("not a SAVIOR-TENSORS v1 file (bad header)")
    view = memoryview(blob)
    pos = len(HEADER)
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise ValueError(f"truncated payload for tensor {name!r}")
            data = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(shape)
            pos += nbytes
            out[name] = data.astype(np.float64)
    except struct.error as exc:
        raise ValueError(f"truncated SAVIOR-TENSORS file: {exc}") from exc
    return out


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
