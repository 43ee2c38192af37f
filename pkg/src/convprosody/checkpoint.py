"""Bit-exact binary checkpoint container.

Layout (all integers little-endian):

    magic "I3CK" | u16 version | u32 header_len | header JSON (utf-8)
    then per tensor, sorted by name:
    u16 name_len | name utf-8 | u8 dtype code | u8 rank | u32 dims... | payload

The header JSON carries the model config, step counter, training-split
prosody normalization stats, and the tensor count; dtype codes are
0 = float32, 1 = float64. Save of a loaded checkpoint reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelConfig
from .pipeline import Checkpoint

MAGIC = b"I3CK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def save_checkpoint(ckpt: Checkpoint, path):
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "step": ckpt.step,
            "stats": ckpt.stats,
            "tensor_count": len(ckpt.tensors),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for name in sorted(ckpt.tensors):
            arr = np.ascontiguousarray(ckpt.tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, n):
        data = self.fh.read(n)
        if len(data) != n:
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.offset}, got {len(data)}")
        self.offset += n
        return data

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Load and validate a checkpoint; tensor shapes are checked against
    a freshly initialized model of the embedded config."""
    with open(path, "rb") as fh:
        reader = _Reader(fh)
        if reader.read(4) != MAGIC:
            raise CheckpointError(f"bad magic in {path}; not a checkpoint file")
        (version, header_len) = reader.unpack("<HI")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(reader.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, np.ndarray] = {}
        for _ in range(header["tensor_count"]):
            (name_len,) = reader.unpack("<H")
            name = reader.read(name_len).decode("utf-8")
            code, rank = reader.unpack("<BB")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            dims = reader.unpack(f"<{rank}I")
            dtype = _CODE_DTYPES[code]
            payload = reader.read(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
            arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(dims)
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            tensors[name] = arr
        if fh.read(1):
            raise CheckpointError(f"trailing bytes after offset {reader.offset}")
    _validate_shapes(config, tensors)
    return Checkpoint(config=config, tensors=tensors, step=header["step"], stats=header["stats"])


def _validate_shapes(config, tensors):
    expected = {name: tuple(t.shape) for name, t in Model.init(config).named_tensors().items()}
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names do not match config (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in tensors.items():
        if tuple(arr.shape) != expected[name]:
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(arr.shape)}, config expects {expected[name]}")


def build_model(ckpt: Checkpoint) -> Model:
    """Materialize a model from a loaded checkpoint."""
    return Model.init(ckpt.config).load_named_tensors(ckpt.tensors)
