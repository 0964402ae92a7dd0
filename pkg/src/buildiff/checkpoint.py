"""Binary checkpoint format for named parameter tensors.

Layout (little-endian): magic "BDIF", version u32, count u32, then per
parameter: name length u16, name bytes (utf-8), rank u8, dims u32 each,
payload f64 row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import DiffTensor

MAGIC = b"BDIF"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_params(path, params: dict[str, DiffTensor | np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, p in params.items():
            arr = np.ascontiguousarray(
                p.data if isinstance(p, DiffTensor) else p, dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_params(path, requires_grad: bool = True) -> dict[str, DiffTensor]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        params: dict[str, DiffTensor] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims).copy()
            params[name] = DiffTensor(data, requires_grad=requires_grad)
        return params
