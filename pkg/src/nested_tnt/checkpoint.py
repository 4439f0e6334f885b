"""Binary checkpoint format.

Layout (little-endian)::

    b"NTNT" | u32 version (=1) | u32 len | config JSON (canonical)
    then per tensor:
    u32 len | name (utf-8) | u8 dtype code | u8 rank | u32 dims[rank] | raw scalars
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .models import ConfigError, Model, ModelConfig, parameter_spec
from .tensor import Tensor

MAGIC = b"NTNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(IOError):
    """Corrupt, truncated or mismatched checkpoint file."""


def save_checkpoint(model: Model, path: str | os.PathLike) -> None:
    cfg = model.config.to_json().encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    for name, t in model.params.items():
        raw = name.encode()
        arr = t.data.astype(_DTYPES[_CODES[t.dtype]], copy=False)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _CODES[t.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def load_checkpoint(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = ModelConfig.from_json(r.take(n).decode())
    except (ConfigError, UnicodeDecodeError, TypeError) as e:
        raise CheckpointError(f"embedded config invalid: {e}") from None

    expected = {name: shape for name, shape, _ in parameter_spec(config)}
    params: dict[str, Tensor] = {}
    while not r.done:
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name at byte {r.pos - n} is not utf-8") from None
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} for this config")
        if tuple(shape) != expected[name]:
            raise CheckpointError(f"{name}: shape {tuple(shape)} but config implies {expected[name]}")
        params[name] = Tensor(arr, dtype=dt.newbyteorder("="))
    missing = [k for k in expected if k not in params]
    if missing:
        raise CheckpointError(f"checkpoint missing {len(missing)} tensors, e.g. {missing[0]!r}")
    return Model(config, {k: params[k] for k in expected})
