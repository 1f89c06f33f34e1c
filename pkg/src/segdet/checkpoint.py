"""SGCK checkpoint files.

Layout, all integers little-endian::

    "SGCK"                        magic
    u32 version
    str kind                      "rpn" or "unet"
    u64 iteration
    str meta                      "key = value" lines describing the model
    u32 count, count x tensor     model parameters in architecture order
    str optimizer kind            "sgd", "adam" or "" when absent
    u64 optimizer steps
    u32 count, count x tensor     optimizer buffers

    str    = u32 byte length + UTF-8 bytes
    tensor = str name, u32 rank, rank x u32 dims, float32 payload
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from .errors import FormatError
from .model import Model

MAGIC = b"SGCK"
VERSION = 1
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    kind: str
    iteration: int
    meta: Dict[str, str] = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer_kind: str = ""
    optimizer_steps: int = 0
    optimizer_tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = VERSION


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _U32.pack(len(b)) + b


def _tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    parts = [_str(name), _U32.pack(arr.ndim)]
    parts += [_U32.pack(d) for d in arr.shape]
    parts.append(arr.tobytes())
    return b"".join(parts)


def encode_meta(meta: Mapping[str, object]) -> str:
    return "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))


def decode_meta(text: str) -> Dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            out[k] = v
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(ck.version), _str(ck.kind), _U64.pack(ck.iteration), _str(encode_meta(ck.meta))]
    parts.append(_U32.pack(len(ck.tensors)))
    parts += [_tensor(n, a) for n, a in ck.tensors.items()]
    parts += [_str(ck.optimizer_kind), _U64.pack(ck.optimizer_steps), _U32.pack(len(ck.optimizer_tensors))]
    parts += [_tensor(n, a) for n, a in ck.optimizer_tensors.items()]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint", offset=len(self.raw))
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def string(self) -> str:
        start = self.pos
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: invalid UTF-8 string", offset=start) from None

    def tensor(self):
        name = self.string()
        start = self.pos
        rank = self.u32()
        if rank > 8:
            raise FormatError(f"{self.path}: tensor {name!r} has implausible rank {rank}", offset=start)
        dims = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, data


def from_bytes(raw: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, expected {MAGIC!r}", offset=0)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    kind = r.string()
    iteration = r.u64()
    meta = decode_meta(r.string())
    tensors = OrderedDict(r.tensor() for _ in range(r.u32()))
    opt_kind = r.string()
    opt_steps = r.u64()
    opt_tensors = OrderedDict(r.tensor() for _ in range(r.u32()))
    if r.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint", offset=r.pos)
    return Checkpoint(kind, iteration, meta, tensors, opt_kind, opt_steps, opt_tensors, version)


def make_checkpoint(model: Model, iteration: int, optimizer=None, meta: Optional[Mapping] = None) -> Checkpoint:
    ck = Checkpoint(model.kind, int(iteration), {k: str(v) for k, v in (meta or {}).items()})
    ck.tensors = OrderedDict((n, p.data.copy()) for n, p in model.params.items())
    if optimizer is not None:
        ck.optimizer_kind = optimizer.kind
        ck.optimizer_steps = optimizer.steps
        ck.optimizer_tensors = OrderedDict((n, a.copy()) for n, a in optimizer.state_tensors().items())
    return ck


def save_checkpoint(path, model: Model, iteration: int, optimizer=None, meta: Optional[Mapping] = None) -> None:
    Path(path).write_bytes(to_bytes(make_checkpoint(model, iteration, optimizer, meta)))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), path)


def apply_checkpoint(ck: Checkpoint, model: Model, optimizer=None) -> None:
    """Copy tensors into ``model`` (and ``optimizer``), validating every shape."""
    if ck.kind != model.kind:
        raise FormatError(f"checkpoint holds a {ck.kind!r} model, expected {model.kind!r}")
    if list(ck.tensors) != list(model.params):
        missing = set(model.params) ^ set(ck.tensors)
        raise FormatError(f"checkpoint parameters do not match the architecture: {sorted(missing)[:5]}")
    for name, arr in ck.tensors.items():
        if arr.shape != model.params[name].shape:
            raise FormatError(f"parameter {name!r}: checkpoint shape {arr.shape}, "
                              f"architecture expects {model.params[name].shape}")
    for name, arr in ck.tensors.items():
        model.params[name].data[...] = arr
    if optimizer is not None:
        if ck.optimizer_kind != optimizer.kind:
            raise FormatError(f"checkpoint optimizer {ck.optimizer_kind!r} does not match {optimizer.kind!r}")
        expected = optimizer.state_tensors()
        for name, arr in expected.items():
            got = ck.optimizer_tensors.get(name)
            if got is None or got.shape != arr.shape:
                raise FormatError(f"optimizer buffer {name!r} missing or mis-shaped")
        optimizer.load_state_tensors(ck.optimizer_tensors, ck.optimizer_steps)
