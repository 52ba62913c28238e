"""Binary checkpoint format.

Little-endian layout::

    b"CSEG"  u32 version
    u32 config_len, config text (utf-8, key=value lines)
    u32 epoch
    u32 tensor_count, then per tensor: u32 rank, u32 dims[rank], f32 data (row-major)

Tensor order: backbone kernel/bias pairs, bank prototypes, bank update counts,
optimizer momentum buffers (same order as the backbone parameters).
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backbone
from .config import RunConfig
from .errors import DatasetIOError
from .prototype import PrototypeBank
from .tensor import Tensor

MAGIC = b"CSEG"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: backbone.BackboneParams
    bank: PrototypeBank
    optimizer: backbone.SGD
    epoch: int


def _write_tensor(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = ckpt.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", ckpt.epoch))
    params = ckpt.params.parameters()
    buffers = ckpt.optimizer.buffers or [np.zeros_like(p.data) for p in params]
    tensors = [p.data for p in params] + [ckpt.bank.prototypes, ckpt.bank.update_counts] + list(buffers)
    buf.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        _write_tensor(buf, t)
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DatasetIOError("checkpoint truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rank = self.u32()
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)


def from_bytes(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise DatasetIOError("not a centerseg checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DatasetIOError(f"unsupported checkpoint version {version}")
    config = RunConfig.from_text(r.take(r.u32()).decode("utf-8"))
    epoch = r.u32()
    tensors = [r.tensor() for _ in range(r.u32())]
    if r.pos != len(raw):
        raise DatasetIOError("trailing bytes after checkpoint payload")
    n_layers = 4
    n_params = 2 * n_layers
    if len(tensors) != 2 * n_params + 2:
        raise DatasetIOError(f"checkpoint holds {len(tensors)} tensors, expected {2 * n_params + 2}")
    kernels = [Tensor(tensors[2 * i], requires_grad=True, dtype=np.float32) for i in range(n_layers)]
    biases = [Tensor(tensors[2 * i + 1], requires_grad=True, dtype=np.float32) for i in range(n_layers)]
    params = backbone.BackboneParams(kernels, biases, backbone._strides_for(config.downsample),
                                     config.feature_dim, config.downsample)
    bank = PrototypeBank(tensors[n_params].copy(), config.momentum,
                         tensors[n_params + 1].astype(np.int64))
    optimizer = backbone.SGD(config.lr, config.weight_decay, buffers=[t.copy() for t in tensors[n_params + 2 :]])
    return Checkpoint(config, params, bank, optimizer, epoch)


def save(ckpt: Checkpoint, path) -> None:
    try:
        Path(path).write_bytes(to_bytes(ckpt))
    except OSError as exc:
        raise DatasetIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)
