"""Binary parameter checkpoints.

Layout (little-endian)::

    b"RFMTLW1"
    u32 len + UTF-8 JSON graph (layer specs in order, each with a branch tag)
    u32 tensor count
    per tensor: u16 len + UTF-8 name, u8 len + ASCII branch tag, u8 rank,
                rank x u32 extents, f32 payload (row-major)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"RFMTLW1"


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TensorRecord:
    name: str
    tag: str
    array: np.ndarray


def dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def raw(self, b):
        self.buf.write(b)

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def blob(self, b):
        self.pack("I", len(b))
        self.raw(b)

    def short_str(self, s, width="H"):
        b = s.encode("utf-8")
        self.pack(width, len(b))
        self.raw(b)

    def shape(self, shape):
        self.pack("B", len(shape))
        for e in shape:
            self.pack("I", int(e))

    def getvalue(self):
        return self.buf.getvalue()


class Reader:
    def __init__(self, buf):
        self.buf = buf
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise CheckpointFormatError("truncated file")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def blob(self):
        return self.take(self.unpack("I"))

    def short_str(self, width="H"):
        return self.take(self.unpack(width)).decode("utf-8")

    def shape(self):
        rank = self.unpack("B")
        return tuple(self.unpack("I") for _ in range(rank))

    def array(self, dtype, shape):
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()

    def expect_end(self):
        if self.off != len(self.buf):
            raise CheckpointFormatError("trailing bytes")


def write_checkpoint(graph: dict, records) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.blob(dump_json(graph))
    w.pack("I", len(records))
    for r in records:
        w.short_str(r.name)
        w.short_str(r.tag, "B")
        a = np.ascontiguousarray(r.array, dtype="<f4")
        w.shape(a.shape)
        w.raw(a.tobytes())
    return w.getvalue()


def read_checkpoint(buf: bytes):
    """Return ``(graph, [TensorRecord])``."""
    r = Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic")
    graph = json.loads(r.blob().decode("utf-8"))
    records = []
    for _ in range(r.unpack("I")):
        name = r.short_str()
        tag = r.short_str("B")
        shape = r.shape()
        records.append(TensorRecord(name, tag, r.array("<f4", shape).astype(np.float32)))
    r.expect_end()
    return graph, records
