"""Binary weights file.

Layout (little-endian)::

    b"DANW" | u32 version=1 | u32 count
    per tensor: u16 name_len | name (UTF-8) | u8 dtype (0=f32) | u8 rank | rank*u32 dims | payload

Parameters come first, then buffers (BN running statistics), in module
attribute order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from .config import DANetConfig
from .fileio import atomic_write_bytes
from .model import DANet, build_model

MAGIC = b"DANW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class WeightsError(ValueError):
    """Base class for unreadable or incompatible weights files."""


class WeightsFormatError(WeightsError):
    """Bad magic, unsupported version or dtype, or malformed header."""


class WeightsShapeError(WeightsError):
    """Tensor names or shapes disagree with the target configuration."""


class WeightsTruncatedError(WeightsError):
    """The file ends before the declared content."""


def encode_weights(model: DANet) -> bytes:
    tensors = list(model.named_tensors())
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors:
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", 0, data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def save_weights(model: DANet, path: Union[str, Path]) -> None:
    atomic_write_bytes(path, encode_weights(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightsTruncatedError(
                f"file truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(buf: bytes) -> Dict[str, np.ndarray]:
    """Parse a weights file into an ordered ``name -> array`` dict."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights version {version} (expected {VERSION})")
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightsFormatError(f"tensor {i}: name is not valid UTF-8") from None
        dtype_code, rank = r.unpack("<BB", f"dtype of {name}")
        if dtype_code not in _DTYPES:
            raise WeightsFormatError(f"{name}: unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}I", f"shape of {name}")
        dtype = _DTYPES[dtype_code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"payload of {name}")
        if name in out:
            raise WeightsFormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise WeightsFormatError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")
    return out


def assign_weights(model: DANet, tensors: Dict[str, np.ndarray]) -> DANet:
    """Copy arrays into ``model`` after validating every name and shape."""
    expected = list(model.named_tensors())
    for name, t in expected:
        if name not in tensors:
            raise WeightsShapeError(f"tensor {name!r} missing from weights file "
                                    f"(expected shape {t.shape})")
        got = tensors[name].shape
        if tuple(got) != tuple(t.shape):
            raise WeightsShapeError(f"tensor {name!r}: file has shape {tuple(got)}, "
                                    f"config expects {tuple(t.shape)}")
    extra = [n for n in tensors if n not in dict(expected)]
    if extra:
        raise WeightsShapeError(f"weights file has unexpected tensor {extra[0]!r}")
    for name, t in expected:
        t.data = tensors[name].copy()
    return model


def load_weights(path: Union[str, Path], config: DANetConfig) -> DANet:
    """Build ``config`` and fill it from ``path``; the result is in eval mode."""
    tensors = decode_weights(Path(path).read_bytes())
    # seed is irrelevant: every tensor is overwritten
    return assign_weights(build_model(config, seed=0), tensors).eval()
