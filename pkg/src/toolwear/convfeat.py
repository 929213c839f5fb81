"""Inference-only VGG-16 convolutional base in numpy.

Tensors are planar float32 arrays shaped ``(channels, height, width)``.  The
flattened feature vector is ordered channel first, then row, then column,
which is simply ``activation.ravel()`` in this layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeMismatchError, TruncatedError

# (number of conv layers, output channels) per block
VGG16_BLOCKS = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))
N_LAYERS = sum(n for n, _ in VGG16_BLOCKS)
FEATURE_CHANNELS = VGG16_BLOCKS[-1][1]

WEIGHT_MAGIC = b"VGGW"
CACHE_MAGIC = b"WFC1"

# im2col scratch budget per strip, in float64 elements (~64 MiB)
_IM2COL_BUDGET = 8 * 1024 * 1024


@dataclass(frozen=True, eq=False)
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, 3, 3) float32
    bias: np.ndarray  # (out_ch,) float32

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32)
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ShapeMismatchError(f"kernel must be (out, in, 3, 3), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeMismatchError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class ConvBase:
    layers: tuple

    def __post_init__(self):
        expected = _layer_shapes()
        if len(self.layers) != len(expected):
            raise ShapeMismatchError(f"expected {len(expected)} conv layers, got {len(self.layers)}")
        for i, (layer, shape) in enumerate(zip(self.layers, expected)):
            if (layer.out_ch, layer.in_ch) != shape:
                raise ShapeMismatchError(
                    f"layer {i}: expected (out, in) = {shape}, got {(layer.out_ch, layer.in_ch)}"
                )

    def __eq__(self, other):
        if not isinstance(other, ConvBase):
            return NotImplemented
        return all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


def _layer_shapes():
    shapes = []
    in_ch = 3
    for n_conv, out_ch in VGG16_BLOCKS:
        for _ in range(n_conv):
            shapes.append((out_ch, in_ch))
            in_ch = out_ch
    return shapes


# -- primitive ops ---------------------------------------------------------------


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation form).

    Products are accumulated in float64 and rounded to float32 once, so the
    result is within half an ulp of the exact sum.
    """
    x = np.asarray(x, dtype=np.float32)
    c, h, w = x.shape
    if c != layer.in_ch:
        raise ShapeMismatchError(f"input has {c} channels, layer expects {layer.in_ch}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1))).astype(np.float64)
    wmat = layer.weight.reshape(layer.out_ch, c * 9).astype(np.float64)
    bias = layer.bias.astype(np.float64)[:, None]
    out = np.empty((layer.out_ch, h, w), dtype=np.float32)
    rows = max(1, min(h, _IM2COL_BUDGET // (c * 9 * w)))
    for y0 in range(0, h, rows):
        y1 = min(h, y0 + rows)
        sh = y1 - y0
        cols = np.empty((c, 3, 3, sh, w), dtype=np.float64)
        for ky in range(3):
            for kx in range(3):
                cols[:, ky, kx] = xp[:, y0 + ky : y1 + ky, kx : kx + w]
        acc = wmat @ cols.reshape(c * 9, sh * w) + bias
        out[:, y0:y1] = acc.reshape(layer.out_ch, sh, w)
    return out


def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0, dtype=np.float32)


def maxpool2x2(t: np.ndarray) -> np.ndarray:
    c, h, w = t.shape
    if h < 2 or w < 2:
        raise ShapeMismatchError(f"cannot 2x2-pool a {h}x{w} map")
    h2, w2 = h // 2, w // 2
    v = t[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2)
    return v.max(axis=(2, 4))


# -- construction and weights ----------------------------------------------------


def random_base(seed: int) -> ConvBase:
    """He-normal weights from a PCG64 stream seeded with ``seed``; zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for out_ch, in_ch in _layer_shapes():
        std = np.sqrt(2.0 / (in_ch * 9))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(np.float32)
        layers.append(ConvLayer(w, np.zeros(out_ch, dtype=np.float32)))
    return ConvBase(tuple(layers))


def save_weights(base: ConvBase, path) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<II", 1, len(base.layers))]
    for layer in base.layers:
        parts.append(struct.pack("<II", layer.out_ch, layer.in_ch))
        parts.append(layer.weight.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path) -> ConvBase:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: not a VGGW weight file")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: truncated header")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    expected = _layer_shapes()
    if n_layers != len(expected):
        raise ShapeMismatchError(
            f"{path}: file holds {n_layers} layers, VGG-16 base needs {len(expected)}"
        )
    pos = 12
    layers = []
    for i, shape in enumerate(expected):
        if pos + 8 > len(blob):
            raise TruncatedError(f"{path}: truncated before layer {i}")
        out_ch, in_ch = struct.unpack_from("<II", blob, pos)
        pos += 8
        if (out_ch, in_ch) != shape:
            raise ShapeMismatchError(
                f"{path}: layer {i} has (out, in) = {(out_ch, in_ch)}, expected {shape}"
            )
        n_w = out_ch * in_ch * 9
        end = pos + 4 * (n_w + out_ch)
        if end > len(blob):
            raise TruncatedError(f"{path}: truncated inside layer {i}")
        w = np.frombuffer(blob, dtype="<f4", count=n_w, offset=pos).reshape(out_ch, in_ch, 3, 3)
        b = np.frombuffer(blob, dtype="<f4", count=out_ch, offset=pos + 4 * n_w)
        layers.append(ConvLayer(w.astype(np.float32), b.astype(np.float32)))
        pos = end
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after last layer")
    return ConvBase(tuple(layers))


def build_conv_base(init) -> ConvBase:
    """``init`` is ``("random", seed)`` or ``("load", path)``."""
    kind, arg = init
    if kind == "random":
        return random_base(int(arg))
    if kind == "load":
        return load_weights(arg)
    raise ValueError(f"unknown initialization {kind!r}")


# -- forward passes --------------------------------------------------------------


def _forward(base: ConvBase, t: np.ndarray, n_blocks: int) -> np.ndarray:
    x = np.asarray(t, dtype=np.float32)
    li = 0
    for n_conv, _ in VGG16_BLOCKS[:n_blocks]:
        for _ in range(n_conv):
            x = relu(conv2d(x, base.layers[li]))
            li += 1
        x = maxpool2x2(x)
    return x


def feature_map_at(base: ConvBase, t: np.ndarray, block_index: int) -> np.ndarray:
    """Activation right after the max-pool closing block ``block_index`` (1..5)."""
    if not 1 <= block_index <= len(VGG16_BLOCKS):
        raise ValueError(f"block index must be in 1..{len(VGG16_BLOCKS)}, got {block_index}")
    _check_input(t, 2**block_index)
    return _forward(base, t, block_index)


def extract_features(base: ConvBase, t: np.ndarray) -> np.ndarray:
    _check_input(t, 32)
    return _forward(base, t, len(VGG16_BLOCKS)).ravel()


def n_features_for(width: int, height: int) -> int:
    return (width // 32) * (height // 32) * FEATURE_CHANNELS


def _check_input(t, min_side):
    shape = np.shape(t)
    if len(shape) != 3 or shape[0] != 3:
        raise ShapeMismatchError(f"expected a (3, h, w) tensor, got {shape}")
    if shape[1] < min_side or shape[2] < min_side:
        raise ShapeMismatchError(
            f"input {shape[2]}x{shape[1]} is smaller than the {min_side}px minimum"
        )


# -- feature cache ----------------------------------------------------------------


@dataclass(eq=False)
class FeatureMatrix:
    values: np.ndarray  # (n_samples, n_features) float32
    ids: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ShapeMismatchError(f"feature matrix must be 2-D, got {v.shape}")
        if len(self.ids) != v.shape[0]:
            raise ShapeMismatchError(f"{len(self.ids)} ids for {v.shape[0]} rows")
        self.values = v
        self.ids = [str(i) for i in self.ids]

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


def save_feature_cache(fm: FeatureMatrix, path) -> None:
    if fm.n_samples >= 2**32 or fm.n_features >= 2**32:
        raise OverflowError("feature matrix dimensions exceed the u32 header fields")
    for i in fm.ids:
        if "\x00" in i:
            raise ValueError(f"sample id {i!r} contains a NUL byte")
    parts = [CACHE_MAGIC, struct.pack("<II", fm.n_samples, fm.n_features)]
    parts.extend(i.encode("utf-8") + b"\x00" for i in fm.ids)
    parts.append(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_feature_cache(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a WFC1 feature cache")
    if len(blob) < 12:
        raise TruncatedError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", blob, 4)
    pos = 12
    # every id needs at least its terminator byte
    if n > len(blob) - pos:
        raise FormatError(f"{path}: dimension overflow, {n} samples cannot fit in {len(blob)} bytes")
    ids = []
    for _ in range(n):
        end = blob.find(b"\x00", pos)
        if end < 0:
            raise TruncatedError(f"{path}: truncated inside the id table")
        ids.append(blob[pos:end].decode("utf-8"))
        pos = end + 1
    need = n * d * 4
    remaining = len(blob) - pos
    if need > remaining:
        raise TruncatedError(f"{path}: expected {need} value bytes, found {remaining}")
    if need < remaining:
        raise FormatError(f"{path}: {remaining - need} trailing bytes")
    values = np.frombuffer(blob, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return FeatureMatrix(values.astype(np.float32), ids)


def stack_features(rows: Sequence[np.ndarray], ids: Sequence[str]) -> FeatureMatrix:
    if not rows:
        return FeatureMatrix(np.zeros((0, 0), dtype=np.float32), [])
    return FeatureMatrix(np.stack(rows).astype(np.float32), list(ids))
