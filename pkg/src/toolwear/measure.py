"""Flank-wear width statistics and wear-frequency heatmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatchError
from .raster import Raster
from .synthgen import FLANK_WEAR

# ISO 3685 tool-life criterion for flank wear width, mm
VB_CRITERION_MM = 0.3


@dataclass(frozen=True)
class WearStats:
    vb_max: float
    vb_avg: float
    exceeds_criterion: bool
    columns_measured: int

    def to_dict(self) -> dict:
        return {
            "vb_max": self.vb_max,
            "vb_avg": self.vb_avg,
            "exceeds_criterion": self.exceeds_criterion,
            "columns_measured": self.columns_measured,
        }


def wear_width_stats(m, px_per_mm: float = 100.0, criterion_mm: float = VB_CRITERION_MM) -> WearStats:
    """VB_max / VB_avg from per-column flank-wear pixel counts.

    Assumes the cutting edge runs along the horizontal image axis, so a column
    is perpendicular to the edge.
    """
    if px_per_mm <= 0:
        raise ValueError("px_per_mm must be positive")
    widths = np.count_nonzero(np.asarray(m) == FLANK_WEAR, axis=0)
    worn = widths[widths > 0]
    if worn.size == 0:
        return WearStats(0.0, 0.0, False, 0)
    vb_max = float(worn.max()) / px_per_mm
    vb_avg = float(worn.mean()) / px_per_mm
    return WearStats(vb_max, vb_avg, vb_max >= criterion_mm, int(worn.size))


def wear_frequency(maps, cls: int) -> np.ndarray:
    """Per-pixel fraction of maps carrying class ``cls``."""
    maps = [np.asarray(m) for m in maps]
    if not maps:
        raise DataError("heatmap needs at least one segmentation map")
    shape = maps[0].shape
    hits = np.zeros(shape, dtype=np.int64)
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ShapeMismatchError(f"map {i} has shape {m.shape}, expected {shape}")
        hits += m == cls
    return hits / len(maps)


def heatmap(maps, cls: int) -> Raster:
    freq = wear_frequency(maps, cls)
    return Raster(np.floor(freq * 255.0 + 0.5).astype(np.uint8))
