"""Checkpoint container and its binary file format.

Layout (little-endian)::

    "PPGM" | u16 version | u32 len | JSON header (len bytes)
    tensors: u32 ndim | u32 dims[ndim] | f32 values

Tensors follow in declaration order: parameters, then normalization
buffers, then Adam first moments, then Adam second moments. The JSON header
carries the architecture config, optimizer step count and run metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, StructuralError
from .model import ArchitectureConfig, Model
from .optim import AdamState

MAGIC = b"PPGM"
VERSION = 1


@dataclass
class ModelCheckpoint:
    config: ArchitectureConfig
    params: list
    buffers: list
    adam: AdamState
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, adam: AdamState | None = None, metadata=None):
        params = [p.astype(np.float32, copy=True) for p in model.parameters()]
        adam = adam.copy() if adam is not None and adam.m else AdamState.zeros_like(params)
        meta = dict(metadata or {})
        meta.setdefault("seed", model.seed)
        rngs = [d.rng.bit_generator.state for d in model.dropout_layers()]
        if rngs:
            meta["dropout_rng"] = rngs
        return cls(model.config, params, [b.astype(np.float32, copy=True) for b in model.buffers()],
                   adam, meta)

    def to_model(self) -> Model:
        model = Model(self.config, self.metadata.get("seed", 0))
        model.set_parameters(self.params)
        model.set_buffers(self.buffers)
        for layer, state in zip(model.dropout_layers(), self.metadata.get("dropout_rng", [])):
            layer.rng.bit_generator.state = state
        return model

    @property
    def task(self):
        return self.config.head

    def equals(self, other):
        def same(a, b):
            return len(a) == len(b) and all(
                x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
            )
        return (self.config.to_dict() == other.config.to_dict()
                and same(self.params, other.params) and same(self.buffers, other.buffers)
                and same(self.adam.m, other.adam.m) and same(self.adam.v, other.adam.v)
                and self.adam.step == other.adam.step and self.metadata == other.metadata)


def _write_tensor(fh, arr):
    arr = np.asarray(arr, dtype="<f4")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(ckpt: ModelCheckpoint, path):
    header = {
        "config": ckpt.config.to_dict(),
        "adam_step": ckpt.adam.step,
        "n_params": len(ckpt.params),
        "n_buffers": len(ckpt.buffers),
        "metadata": ckpt.metadata,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(blob)))
        fh.write(blob)
        for group in (ckpt.params, ckpt.buffers, ckpt.adam.m, ckpt.adam.v):
            for arr in group:
                _write_tensor(fh, arr)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}", self.pos)
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, what):
        (ndim,) = self.unpack("<I", what)
        shape = self.unpack(f"<{ndim}I", what)
        count = int(np.prod(shape)) if ndim else 1
        data = self.take(4 * count, what)
        return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)", 0)
    version, length = r.unpack("<HI", "header")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    try:
        header = json.loads(r.take(length, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header ({exc})", 10) from None
    config = ArchitectureConfig.from_dict(header["config"])
    n_p, n_b = header["n_params"], header["n_buffers"]
    params = [r.tensor(f"parameter {i}") for i in range(n_p)]
    buffers = [r.tensor(f"buffer {i}") for i in range(n_b)]
    m = [r.tensor(f"adam m {i}") for i in range(n_p)]
    v = [r.tensor(f"adam v {i}") for i in range(n_p)]
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes", r.pos)
    ckpt = ModelCheckpoint(config, params, buffers, AdamState(m, v, header["adam_step"]),
                           header["metadata"])
    expected = [p.shape for p in Model(config).parameters()]
    if [p.shape for p in params] != expected:
        raise StructuralError(f"{path}: parameter shapes do not match the stored architecture")
    return ckpt
