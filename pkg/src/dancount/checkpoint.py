"""Binary checkpoint files.

Layout (all integers little-endian)::

    magic   b"DANCKPT\\0"
    u32     format version
    32 B    sha256 fingerprint of the config text
    u32 + bytes   ascii metadata, space separated key=value pairs
    u32     parameter count
    per parameter:
        u16 + bytes   utf-8 name
        u8            ndim
        u32 * ndim    shape
        f32 * prod    data, little-endian
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MAGIC = b"DANCKPT\0"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    fingerprint: bytes = b"\0" * 32
    meta: dict[str, str] = field(default_factory=dict)


def encode(ckpt: Checkpoint) -> bytes:
    if len(ckpt.fingerprint) != 32:
        raise ValidationError("fingerprint must be 32 bytes")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(ckpt.fingerprint)
    meta = " ".join(f"{k}={v}" for k, v in ckpt.meta.items()).encode("ascii")
    out.write(struct.pack("<I", len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr)
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", a.ndim))
        out.write(struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(a.astype("<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError(
                f"{self.path}: truncated checkpoint at byte {self.pos} (need {n} more bytes)"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes, path="<bytes>") -> Checkpoint:
    rd = _Reader(buf, path)
    if rd.take(len(MAGIC)) != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    fingerprint = rd.take(32)
    (mlen,) = rd.unpack("<I")
    meta = {}
    for item in rd.take(mlen).decode("ascii").split():
        k, _, v = item.partition("=")
        meta[k] = v
    (count,) = rd.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if rd.pos != len(buf):
        raise ValidationError(f"{path}: {len(buf) - rd.pos} trailing bytes after checkpoint")
    return Checkpoint(params, fingerprint, meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), path)
