"""Feature-map and image data model, the ANYT container, and resize baselines.

Feature maps and guidance images are plain numpy arrays laid out
``[height, width, channels]``. Guidance images always have 3 channels with
values in ``[0, 1]``.

ANYT layout (little-endian)::

    b"ANYT" | version u8 = 1 | dtype u8 (1 = float32) | ndim u8 = 3
    | ndim x u32 dims (height, width, channels) | float32 payload, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

from agnostic_upsampler.errors import (
    FormatError,
    ShapeError,
    TruncatedFileError,
    UnsupportedFormatError,
    ValidationError,
)

MAGIC = b"ANYT"
VERSION = 1
DTYPE_FLOAT32 = 1
HEADER_SIZE = 4 + 3 + 3 * 4

_PREFIX = struct.Struct("<4sBBB")
_DIMS = struct.Struct("<3I")


def validate_feature_map(fmap, name: str = "feature map") -> np.ndarray:
    """Return ``fmap`` as an array after checking rank, extent and finiteness."""
    arr = np.asarray(fmap)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be rank-3 [height, width, channels], got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def validate_image(image, name: str = "image") -> np.ndarray:
    arr = validate_feature_map(image, name)
    if arr.shape[2] != 3:
        raise ShapeError(f"{name} must have exactly 3 channels, got {arr.shape[2]}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def encode_feature_map(fmap) -> bytes:
    arr = validate_feature_map(fmap)
    h, w, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _PREFIX.pack(MAGIC, VERSION, DTYPE_FLOAT32, 3) + _DIMS.pack(h, w, c) + payload


def decode_feature_map(buf: bytes) -> np.ndarray:
    if len(buf) < _PREFIX.size:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise FormatError("bad magic bytes")
        raise TruncatedFileError("file ends inside the ANYT header")
    magic, version, dtype, ndim = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported ANYT version {version}")
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedFormatError(f"unsupported dtype code {dtype}")
    if ndim != 3:
        raise FormatError(f"expected ndim 3, got {ndim}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError("file ends inside the ANYT dimension table")
    h, w, c = _DIMS.unpack_from(buf, _PREFIX.size)
    expected = HEADER_SIZE + 4 * h * w * c
    if len(buf) < expected:
        raise TruncatedFileError(f"payload truncated: {len(buf)} bytes, expected {expected}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=HEADER_SIZE)
    arr = arr.astype(np.float32).reshape(h, w, c)
    return validate_feature_map(arr)


def write_feature_map(fmap, path: str | os.PathLike) -> None:
    data = encode_feature_map(fmap)
    with open(path, "wb") as f:
        f.write(data)


def read_feature_map(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_feature_map(f.read())


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit PNG into a float32 ``[H, W, 3]`` array in ``[0, 1]``.

    Grayscale is replicated to three channels and alpha is dropped.
    """
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise FormatError(f"{path}: expected PNG, got {img.format}")
            rgb = img.convert("RGB")
    except (Image.UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: not a decodable PNG") from exc
    return np.asarray(rgb, dtype=np.float32) / np.float32(255.0)


def save_image(image, path: str | os.PathLike) -> None:
    arr = validate_image(image)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def _bilinear_axis(n_in: int, n_out: int):
    # source = (dst + 0.5) * n_in / n_out - 0.5, negative coordinates clamp to 0
    dst = np.arange(n_out, dtype=np.int64)
    src = ((2 * dst + 1) * n_in - n_out) / (2.0 * n_out)
    src = np.maximum(src, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    """Nearest source index per destination index (ties go to the smaller index).

    Evaluated in exact integer arithmetic: ``ceil(src - 0.5)`` with
    ``src - 0.5 = ((2 dst + 1) n_in - 2 n_out) / (2 n_out)``.
    """
    dst = np.arange(n_out, dtype=np.int64)
    num = (2 * dst + 1) * n_in - 2 * n_out
    idx = -((-num) // (2 * n_out))
    return np.clip(idx, 0, n_in - 1)


def _check_size(out_h: int, out_w: int) -> None:
    if int(out_h) < 1 or int(out_w) < 1:
        raise ValidationError(f"target size must be positive, got ({out_h}, {out_w})")


def resize_bilinear(arr, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with the half-pixel (align-corners=false) convention."""
    _check_size(out_h, out_w)
    src = validate_feature_map(arr, "resize input")
    h, w, _ = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()
    x = src.astype(np.float64)
    lo, hi, frac = _bilinear_axis(h, out_h)
    a, b = x[lo], x[hi]
    x = a + frac[:, None, None] * (b - a)
    lo, hi, frac = _bilinear_axis(w, out_w)
    a, b = x[:, lo], x[:, hi]
    x = a + frac[None, :, None] * (b - a)
    return x.astype(src.dtype)


def resize_nearest(arr, out_h: int, out_w: int) -> np.ndarray:
    _check_size(out_h, out_w)
    src = validate_feature_map(arr, "resize input")
    h, w, _ = src.shape
    rows = nearest_indices(h, out_h)
    cols = nearest_indices(w, out_w)
    return src[rows][:, cols].copy()


def area_downsample(arr, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool over integer blocks; sizes must divide evenly."""
    src = validate_feature_map(arr, "pooling input")
    h, w, c = src.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"cannot area-pool {h}x{w} to {out_h}x{out_w}")
    blocks = src.astype(np.float64).reshape(out_h, h // out_h, out_w, w // out_w, c)
    return blocks.mean(axis=(1, 3)).astype(src.dtype)
