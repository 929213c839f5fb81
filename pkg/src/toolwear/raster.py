"""Image container, binary PGM/PPM I/O, resizing, normalization and augmentation.

Layout conventions used throughout the package:

* ``Raster.data`` is an ``(height, width, channels)`` array, i.e. row-major and
  channel-interleaved.  ``uint8`` samples live in [0, 255], float samples in [0, 1].
* A tensor fed to the convolutional base is a planar ``(channels, height, width)``
  float32 array.
* A segmentation map is a 2-D ``uint8`` array of class indices with the same
  height and width as its raster.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import FormatError, ShapeMismatchError, TruncatedError, UnsupportedMaxvalError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}


@dataclass(eq=False)
class Raster:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeMismatchError(f"raster data must be (h, w, 1|3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeMismatchError("raster must be at least 1x1")
        if data.dtype != np.uint8:
            data = data.astype(np.float32, copy=False)
            if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
                raise ValueError("float raster samples must lie in [0, 1]")
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def is_float(self) -> bool:
        return self.data.dtype != np.uint8

    def to_uint8(self) -> np.ndarray:
        if not self.is_float:
            return self.data
        return quantize(self.data)

    def to_unit(self) -> np.ndarray:
        """Samples scaled to [0, 1] as float32."""
        if self.is_float:
            return self.data
        return self.data.astype(np.float32) / np.float32(255.0)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.dtype == other.data.dtype and np.array_equal(self.data, other.data)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map unit floats to bytes with round-half-up, clamped to [0, 255]."""
    scaled = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


# -- netpbm I/O ----------------------------------------------------------------


def _header_tokens(blob: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the first payload byte.
    """
    tokens = []
    pos = 0
    n = len(blob)
    while len(tokens) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of header")
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the samples
    if pos >= n or not blob[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte")
    return tokens, pos + 1


def decode_netpbm(blob: bytes) -> Raster:
    magic = blob[:2]
    if magic not in _MAGIC_CHANNELS:
        raise FormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    channels = _MAGIC_CHANNELS[magic]
    tokens, offset = _header_tokens(blob[2:], 3)
    offset += 2
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"non-numeric header field in {tokens!r}") from None
    if width < 1 or height < 1:
        raise FormatError(f"invalid image dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"maxval {maxval} unsupported; only 255 is accepted")
    expected = width * height * channels
    payload = blob[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedError(f"expected {expected} sample bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()
    return Raster(data)


def encode_netpbm(r: Raster) -> bytes:
    magic = b"P5" if r.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (r.width, r.height)
    return header + np.ascontiguousarray(r.to_uint8()).tobytes()


def read_image(path: Union[str, os.PathLike]) -> Raster:
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_netpbm(blob)


def write_image(r: Raster, path: Union[str, os.PathLike]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_netpbm(r))


def read_segmap(path) -> np.ndarray:
    r = read_image(path)
    if r.channels != 1:
        raise FormatError(f"{path}: segmentation maps must be single-channel")
    return r.data[:, :, 0]


def write_segmap(m: np.ndarray, path) -> None:
    write_image(Raster(np.asarray(m, dtype=np.uint8)), path)


# -- resampling ----------------------------------------------------------------


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(r: Raster, new_w: int, new_h: int) -> Raster:
    """Bilinear resize with half-pixel centres, clamped at the borders.

    uint8 inputs give uint8 outputs (rounded half-up); float stays float.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target size must be positive, got {new_w}x{new_h}")
    src = r.data.astype(np.float64)
    y0, y1, ty = _axis_weights(r.height, new_h)
    x0, x1, tx = _axis_weights(r.width, new_w)
    top = src[y0]
    rows = top + ty[:, None, None] * (src[y1] - top)
    left = rows[:, x0]
    out = left + tx[None, :, None] * (rows[:, x1] - left)
    # interpolation is convex; clip away last-ulp excursions
    out = np.clip(out, src.min(), src.max())
    if r.is_float:
        return Raster(out.astype(np.float32))
    return Raster(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def normalize(r: Raster) -> np.ndarray:
    """ImageNet-style standardization into a planar (3, h, w) float32 tensor."""
    unit = r.to_unit()
    if unit.shape[2] == 1:
        unit = np.repeat(unit, 3, axis=2)
    t = (unit - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(t.transpose(2, 0, 1), dtype=np.float32)


# -- augmentation --------------------------------------------------------------


def _translate(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    dst_y = slice(max(dy, 0), h + min(dy, 0))
    dst_x = slice(max(dx, 0), w + min(dx, 0))
    src_y = slice(max(-dy, 0), h + min(-dy, 0))
    src_x = slice(max(-dx, 0), w + min(-dx, 0))
    out[dst_y, dst_x] = a[src_y, src_x]
    return out


def _apply(a: np.ndarray, op) -> np.ndarray:
    if op == "flip_h":
        return a[:, ::-1].copy()
    if op == "flip_v":
        return a[::-1].copy()
    if op == "rot90":
        # counter-clockwise quarter turn
        return np.ascontiguousarray(np.rot90(a, 1, axes=(0, 1)))
    if isinstance(op, tuple) and len(op) == 3 and op[0] == "translate":
        return _translate(a, int(op[1]), int(op[2]))
    raise ValueError(f"unknown augmentation {op!r}")


def augment(r: Raster, m: np.ndarray | None, op):
    """Apply one geometric op to an image and (optionally) its class map.

    ``op`` is ``"flip_h"``, ``"flip_v"``, ``"rot90"`` or ``("translate", dx, dy)``.
    Translation moves content by (+dx, +dy) and fills vacated pixels with 0,
    which is also the background class.
    """
    if m is not None and np.shape(m) != (r.height, r.width):
        raise ShapeMismatchError(
            f"segmap shape {np.shape(m)} does not match raster {r.height}x{r.width}"
        )
    out_r = Raster(_apply(r.data, op))
    out_m = None if m is None else _apply(np.asarray(m), op)
    return out_r, out_m
