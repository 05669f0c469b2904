"""Binary checkpoint format (all integers little-endian u32).

    "CETN" | version | len + model-config JSON | tensor count |
    per tensor: len + utf-8 name, ndim, dims..., u8 precision (0=f32, 1=f64), raw values |
    CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, build_model

MAGIC = b"CETN"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode(cfg: ModelConfig, state) -> bytes:
    parts = [MAGIC, _u32(VERSION)]
    blob = cfg.to_json().encode("utf-8")
    parts += [_u32(len(blob)), blob, _u32(len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}", sum(map(len, parts)))
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim), *(_u32(d) for d in arr.shape),
                  bytes([_TAGS[dt]]), np.ascontiguousarray(arr, dtype=dt).tobytes()]
    body = b"".join(parts)
    return body + _u32(zlib.crc32(body))


def save_checkpoint(model: Model, path):
    data = encode(model.cfg, model.state_dict())
    Path(path).write_bytes(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.pos, self.end = data, 0, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(data: bytes):
    """Return ``(ModelConfig, OrderedDict[name, ndarray])``; validates magic, version and CRC."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic; not a checkpoint", 0)
    if len(data) < 12:
        raise FormatError("file too short for header and checksum", len(data))
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    end = len(data) - 4
    stored = struct.unpack("<I", data[end:])[0]
    if zlib.crc32(data[:end]) != stored:
        raise FormatError("CRC32 mismatch; file is corrupted or truncated", end)
    rd = _Reader(data, end)
    rd.pos = 8
    n = rd.u32("config length")
    start = rd.pos
    try:
        cfg = ModelConfig.from_json(rd.take(n, "config").decode("utf-8"))
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"invalid model config: {exc}", start) from exc
    count = rd.u32("tensor count")
    state = OrderedDict()
    for _ in range(count):
        at = rd.pos
        name = rd.take(rd.u32("name length"), "tensor name").decode("utf-8")
        ndim = rd.u32("ndim")
        shape = tuple(rd.u32("dimension") for _ in range(ndim))
        tag_at = rd.pos
        tag = rd.take(1, "precision tag")[0]
        if tag not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown precision tag {tag}", tag_at)
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        raw = rd.take(nbytes, f"values of {name!r}")
        if name in state:
            raise FormatError(f"duplicate tensor {name!r}", at)
        state[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if rd.pos != end:
        raise FormatError("trailing bytes after tensor table", rd.pos)
    return cfg, state


def load_checkpoint(path, model: Model | None = None) -> Model:
    """Load a checkpoint into ``model`` (if given) or a freshly built model.

    The file is fully parsed and checked before any parameter is touched.
    """
    cfg, state = decode(Path(path).read_bytes())
    if model is None:
        model = build_model(cfg, seed=None)
    model.load_state_dict(state)
    return model


def read_config(path) -> ModelConfig:
    return decode(Path(path).read_bytes())[0]
