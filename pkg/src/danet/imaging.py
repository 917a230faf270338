"""Image files and model-input normalisation.

Two formats are read and written: 8-bit RGB PNG (through Pillow) and a raw
format made of a u32 little-endian width, a u32 little-endian height, then
``height * width * 3`` RGB bytes in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
# model inputs are (rgb / 255 - MEAN) / STD with images scaled to [0, 1]
MEAN = 0.5
STD = 0.25


class ImageFormatError(ValueError):
    """The file is not a readable PNG or raw image."""


def encode_raw(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"raw images are [H, W, 3] uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    return struct.pack("<II", w, h) + np.ascontiguousarray(img).tobytes()


def decode_raw(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ImageFormatError("raw image shorter than its 8-byte header")
    w, h = struct.unpack("<II", buf[:8])
    need = w * h * 3
    if w == 0 or h == 0:
        raise ImageFormatError(f"raw image has empty size {w}x{h}")
    if len(buf) - 8 != need:
        raise ImageFormatError(f"raw image {w}x{h} needs {need} pixel bytes, file has {len(buf) - 8}")
    return np.frombuffer(buf, np.uint8, offset=8).reshape(h, w, 3).copy()


def read_image(path: Union[str, Path]) -> np.ndarray:
    """Load a PNG or raw file as an [H, W, 3] uint8 array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read image {path}: {exc.strerror}") from None
    if buf.startswith(PNG_SIGNATURE):
        try:
            with Image.open(io.BytesIO(buf)) as im:
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        except Exception as exc:  # Pillow raises a variety of types
            raise ImageFormatError(f"cannot decode PNG {path}: {exc}") from None
    return decode_raw(buf)


def encode_png(image: np.ndarray) -> bytes:
    out = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(out, format="PNG")
    return out.getvalue()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] to [H, W, 3] uint8."""
    return (np.clip(np.asarray(image).transpose(1, 2, 0), 0, 1) * 255 + 0.5).astype(np.uint8)


def normalize(image: np.ndarray) -> np.ndarray:
    """[..., 3, H, W] floats in [0, 1] to model input."""
    return ((np.asarray(image, dtype=np.float32) - MEAN) / STD).astype(np.float32)
