"""Cell-wise segmentation baseline on intermediate VGG activations.

Every spatial cell of the block-``k`` feature map (a ``2**k`` pixel square)
is classified by two one-vs-rest boosted models, flank wear and chipping.
Cell predictions are upsampled back to the pixel grid by repetition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boost
from .convfeat import ConvBase, feature_map_at
from .errors import DataError, ShapeMismatchError
from .raster import Raster, normalize
from .synthgen import BACKGROUND, CHIPPING, FLANK_WEAR, TOOL

WEAR_TARGETS = {FLANK_WEAR: "flank_wear", CHIPPING: "chipping"}


@dataclass
class CellModel:
    block: int
    models: dict = field(default_factory=dict)  # class id -> Ensemble or None

    @property
    def factor(self) -> int:
        return 2**self.block


def cell_features(base: ConvBase, image: Raster, block: int) -> np.ndarray:
    """(n_cells, channels) matrix, cells in row-major grid order."""
    fmap = feature_map_at(base, normalize(image), block)
    c = fmap.shape[0]
    return np.ascontiguousarray(fmap.reshape(c, -1).T)


def cell_truth(segmap: np.ndarray, factor: int) -> np.ndarray:
    """Majority class per cell; ties go to the higher class id (wear first)."""
    m = np.asarray(segmap)
    gh, gw = m.shape[0] // factor, m.shape[1] // factor
    blocks = m[: gh * factor, : gw * factor].reshape(gh, factor, gw, factor)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(4)], axis=-1)
    score = counts * 4 + np.arange(4)
    return score.argmax(axis=-1).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * levels)
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (m0[-1] * w0 / total - m0) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1
    return int(np.argmax(between))


def upsample_cells(cells: np.ndarray, factor: int, height: int, width: int) -> np.ndarray:
    up = np.repeat(np.repeat(cells, factor, axis=0), factor, axis=1)
    pad_y = height - up.shape[0]
    pad_x = width - up.shape[1]
    if pad_y or pad_x:
        up = np.pad(up, ((0, pad_y), (0, pad_x)), mode="edge")
    return up


def train_cell_model(base: ConvBase, images, segmaps, block: int,
                     cfg: boost.GbmConfig, max_cells: int | None = None,
                     seed: int = 0) -> CellModel:
    feats = []
    truth = []
    for img, m in zip(images, segmaps):
        if np.shape(m) != (img.height, img.width):
            raise ShapeMismatchError("segmap and image dimensions differ")
        feats.append(cell_features(base, img, block))
        truth.append(cell_truth(m, 2**block).ravel())
    if not feats:
        raise DataError("no training images for the cell model")
    X = np.concatenate(feats)
    y = np.concatenate(truth)
    if max_cells is not None and X.shape[0] > max_cells:
        keep = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_cells, replace=False))
        X, y = X[keep], y[keep]
    model = CellModel(block)
    for cls in WEAR_TARGETS:
        target = (y == cls).astype(np.int64)
        model.models[cls] = boost.fit_gbm(X, target, cfg) if 0 < target.sum() < target.size else None
    return model


def segment_cellwise(base: ConvBase, cell_model: CellModel, image: Raster) -> np.ndarray:
    f = cell_model.factor
    gh, gw = image.height // f, image.width // f
    if gh < 1 or gw < 1:
        raise ShapeMismatchError(f"image smaller than one {f}px cell")
    X = cell_features(base, image, cell_model.block)
    n_expected = next((e.n_features for e in cell_model.models.values() if e), X.shape[1])
    if X.shape[1] != n_expected:
        raise ShapeMismatchError(
            f"cell model expects {n_expected} channels, block {cell_model.block} gives {X.shape[1]}"
        )
    probs = np.zeros((X.shape[0], 2))
    for j, cls in enumerate(WEAR_TARGETS):
        e = cell_model.models.get(cls)
        if e is not None:
            probs[:, j] = boost.sigmoid(boost.predict_margins(e, X))
    wear_cls = np.array(list(WEAR_TARGETS))[probs.argmax(axis=1)]
    is_wear = probs.max(axis=1) >= 0.5

    # non-wear cells: tool vs background by mean intensity against Otsu
    gray = image.to_uint8().mean(axis=2)
    cell_mean = gray[: gh * f, : gw * f].reshape(gh, f, gw, f).mean(axis=(1, 3)).ravel()
    plain = np.where(cell_mean > otsu_threshold(gray), TOOL, BACKGROUND)
    cells = np.where(is_wear, wear_cls, plain).astype(np.uint8).reshape(gh, gw)
    return upsample_cells(cells, f, image.height, image.width)


def save_cell_model(model: CellModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"block": model.block, "classes": {}}
    for cls, name in WEAR_TARGETS.items():
        e = model.models.get(cls)
        meta["classes"][name] = None if e is None else f"cells_{name}.wgbm"
        if e is not None:
            boost.save_model(e, d / f"cells_{name}.wgbm")
    (d / "cells.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_cell_model(directory) -> CellModel:
    d = Path(directory)
    meta = json.loads((d / "cells.json").read_text())
    model = CellModel(int(meta["block"]))
    for cls, name in WEAR_TARGETS.items():
        fname = meta["classes"].get(name)
        model.models[cls] = None if fname is None else boost.load_model(d / fname)
    return model
