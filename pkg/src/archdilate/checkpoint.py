"""Binary checkpoint: named float64 tensors plus genotype and config text.

Layout (little-endian)::

    b"NADR" | u32 version | u32 entry count
    per entry: u32 name length | utf-8 name | u32 rank | rank * u64 dims | f64 payload
    u32 length | genotype text | u32 length | config text
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DataError

MAGIC = b"NADR"
VERSION = 1


class CheckpointError(DataError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    genotype_text: str = ""
    config_text: str = ""

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(_text(name))
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    parts += [_text(ckpt.genotype_text), _text(ckpt.config_text)]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def loads(raw: bytes, source="<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: magic bytes {magic!r} != {MAGIC!r}")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        name = r.text()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    geno, cfg = r.text(), r.text()
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(tensors, geno, cfg)


def save(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"no such checkpoint: {path}") from None
    return loads(raw, path)
