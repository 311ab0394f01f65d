"""Binary parameter checkpoints.

Layout::

    b"GRADCORE-CKPT <version> <count>\\n"
    per parameter:
        uint32 name length, name bytes (utf-8)
        uint32 rank, rank x uint32 dims
        prod(dims) x float32, little-endian
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .params import ParamRegistry
from .tensor import Tensor

MAGIC = "GRADCORE-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    path = Path(path)
    chunks = [f"{MAGIC} {VERSION} {len(params)}\n".encode("ascii")]
    for name, t in params.items():
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header")
    header = buf[:nl].decode("ascii", errors="replace").split()
    if len(header) != 3 or header[0] != MAGIC:
        raise CheckpointError(f"{path}: bad header {buf[:nl]!r}")
    if int(header[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header[1]}")
    count = int(header[2])
    pos = nl + 1
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt ({e})") from e
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def load_checkpoint(path, trainable: bool = True) -> ParamRegistry:
    reg = ParamRegistry()
    for name, arr in load_arrays(path).items():
        reg.register(name, Tensor(arr), trainable=trainable)
    return reg
