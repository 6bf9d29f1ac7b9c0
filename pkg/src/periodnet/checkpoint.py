"""Binary checkpoint container (``PNCK``).

Layout, little-endian throughout::

    "PNCK" u32 version
    str variant                      (u32 byte length + UTF-8)
    u64 iteration
    table parameters                 (u32 count, then per entry:
                                      str name, u32 ndim, u32 dims[ndim], f32 payload)
    u32 n_optimizers, per optimizer:
        str name, f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step, table m, table v
    u32 stats_dim, f32 means[dim], f32 stds[dim]     (dim 0 = no stats)
    str config                       (JSON, sorted keys)
    u32 CRC32 of everything above
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError
from .features import NormStats

MAGIC = b"PNCK"
VERSION = 1


@dataclass
class RAdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class Checkpoint:
    variant: str
    iteration: int
    params: dict
    optimizers: dict
    stats: NormStats | None
    config: dict


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def raw(self, b: bytes):
        self.parts.append(b)

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.pack("I", len(b))
        self.raw(b)

    def table(self, arrays: dict):
        self.pack("I", len(arrays))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            self.string(name)
            self.pack("I", arr.ndim)
            self.pack(f"{arr.ndim}I", *arr.shape)
            self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def string(self) -> str:
        (n,) = self.unpack("I")
        return self.take(n).decode("utf-8")

    def table(self) -> dict:
        (count,) = self.unpack("I")
        out = {}
        for _ in range(count):
            name = self.string()
            (ndim,) = self.unpack("I")
            shape = self.unpack(f"{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    w.string(ckpt.variant)
    w.pack("Q", ckpt.iteration)
    w.table(ckpt.params)
    w.pack("I", len(ckpt.optimizers))
    for name, st in ckpt.optimizers.items():
        w.string(name)
        w.pack("4dQ", st.lr, st.beta1, st.beta2, st.eps, st.t)
        w.table(st.m)
        w.table(st.v)
    if ckpt.stats is None:
        w.pack("I", 0)
    else:
        w.pack("I", ckpt.stats.dim)
        w.raw(np.asarray(ckpt.stats.mean, dtype="<f4").tobytes())
        w.raw(np.asarray(ckpt.stats.std, dtype="<f4").tobytes())
    w.string(json.dumps(ckpt.config, sort_keys=True))
    body = w.bytes()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise FormatError(f"not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < 12:
        raise CorruptionError("checkpoint truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(8)
    variant = r.string()
    (iteration,) = r.unpack("Q")
    params = r.table()
    (n_opt,) = r.unpack("I")
    optimizers = {}
    for _ in range(n_opt):
        name = r.string()
        lr, b1, b2, eps, t = r.unpack("4dQ")
        optimizers[name] = RAdamState(lr, b1, b2, eps, t, r.table(), r.table())
    (dim,) = r.unpack("I")
    stats = None
    if dim:
        vals = np.frombuffer(r.take(8 * dim), dtype="<f4").astype(np.float32)
        stats = NormStats(vals[:dim].copy(), vals[dim:].copy())
    config = json.loads(r.string())
    if r.pos != len(body):
        raise CorruptionError("trailing bytes in checkpoint")
    return Checkpoint(variant, iteration, params, optimizers, stats, config)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
