"""Procedural worn-insert images with pixel-exact ground truth.

The insert is seen from its flank side: dark background on top, a bright
insert body below whose upper boundary is the cutting edge.  The edge runs
roughly along the image's horizontal axis, so flank-wear width is measured
per column.

Class indices in segmentation maps: 0 background, 1 tool, 2 flank wear,
3 chipping.  Built-up edge is drawn but labelled as tool.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .raster import Raster, quantize, write_image

BACKGROUND, TOOL, FLANK_WEAR, CHIPPING = 0, 1, 2, 3
MANIFEST_FIELDS = ("id", "image", "segmap", "flank_wear", "chipping", "no_wear", "built_up_edge")
MAX_RENDER_ATTEMPTS = 50


@dataclass(frozen=True)
class WearLabels:
    flank_wear: bool
    chipping: bool
    no_wear: bool
    built_up_edge: bool = False


@dataclass(frozen=True)
class CorpusConfig:
    n_images: int = 648
    img_w: int = 64
    img_h: int = 64
    # reference-dataset prevalences: 536, 359 and 90 of 648 images
    p_flank: float = 0.8272
    p_chip: float = 0.5540
    p_bue: float = 0.1389
    difficulty: str = "easy"
    seed: int = 0
    px_per_mm: float = 100.0
    min_region_px: int = 30

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.img_w < 8 or self.img_h < 8:
            raise ValueError("images must be at least 8x8")
        for name in ("p_flank", "p_chip", "p_bue"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.difficulty not in DIFFICULTY:
            raise ValueError(f"difficulty must be one of {sorted(DIFFICULTY)}")
        if self.px_per_mm <= 0:
            raise ValueError("px_per_mm must be positive")
        if self.min_region_px < 1:
            raise ValueError("min_region_px must be >= 1")


@dataclass(frozen=True)
class Difficulty:
    noise_sigma: float
    illumination: float  # max relative brightness change across the frame
    tool_level: float
    wear_level: float
    chip_level: float
    bue_level: float
    band_frac: tuple  # flank-wear band width range, fraction of image height
    chip_halfwidth_frac: tuple  # fraction of image width
    chip_depth_frac: tuple  # fraction of image height
    max_notches: int


DIFFICULTY = {
    "easy": Difficulty(
        noise_sigma=0.02, illumination=0.05, tool_level=0.42, wear_level=0.92,
        chip_level=0.10, bue_level=0.62, band_frac=(0.12, 0.24),
        chip_halfwidth_frac=(0.07, 0.13), chip_depth_frac=(0.14, 0.24), max_notches=3,
    ),
    "hard": Difficulty(
        noise_sigma=0.06, illumination=0.25, tool_level=0.45, wear_level=0.65,
        chip_level=0.28, bue_level=0.70, band_frac=(0.04, 0.16),
        chip_halfwidth_frac=(0.025, 0.07), chip_depth_frac=(0.04, 0.10), max_notches=4,
    ),
}


@dataclass(frozen=True)
class InsertParams:
    """What to draw on one image; geometry is drawn from the RNG."""

    width: int
    height: int
    flank_wear: bool
    chipping: bool
    built_up_edge: bool
    difficulty: str = "easy"
    # fixed per-column band width in pixels; None draws a random profile
    band_width: int | None = None
    size_scale: float = 1.0


@dataclass
class Sample:
    id: str
    image: Raster
    segmap: np.ndarray
    labels: WearLabels = field(default=None)


def labels_from_segmap(m, min_region_px: int = 30, built_up_edge: bool = False) -> WearLabels:
    m = np.asarray(m)
    flank = int(np.count_nonzero(m == FLANK_WEAR)) >= min_region_px
    chip = int(np.count_nonzero(m == CHIPPING)) >= min_region_px
    return WearLabels(flank, chip, not (flank or chip), bool(built_up_edge))


def _edge_rows(rng, w, h):
    """Cutting-edge row per column and the insert's left limit."""
    y0 = rng.uniform(0.28, 0.40) * h
    slope = rng.uniform(-0.04, 0.04)
    x_left = int(rng.uniform(0.04, 0.16) * w)
    xs = np.arange(w)
    edge = np.rint(y0 + slope * (xs - w / 2)).astype(np.int64)
    return edge, x_left


def render_insert(params: InsertParams, rng: np.random.Generator):
    """Draw one insert; returns (uint8 grayscale Raster, class map)."""
    w, h = params.width, params.height
    diff = DIFFICULTY[params.difficulty]
    scale = params.size_scale
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]

    edge, x_left = _edge_rows(rng, w, h)
    # the insert flank widens leftwards below the corner; cutting-edge
    # columns are exactly x >= x_left
    lean = rng.uniform(-0.25, 0.0)
    left_bound = x_left + lean * np.clip(ys - edge[x_left], 0, None)
    insert = (ys >= edge[None, :]) & (xs >= left_bound)
    on_edge = insert & (xs >= x_left)
    seg = np.where(insert, TOOL, BACKGROUND).astype(np.uint8)

    img = np.full((h, w), 0.06, dtype=np.float64)
    # tool body: mild vertical shading away from the edge plus grinding texture
    depth_below = np.clip(ys - edge[None, :], 0, None) / h
    body = diff.tool_level - 0.08 * depth_below + 0.02 * np.sin(xs * rng.uniform(0.6, 1.4))
    img = np.where(insert, body, img)

    edge_cols = np.arange(max(x_left, 0), w)

    if params.flank_wear:
        if params.band_width is not None:
            widths = np.full(w, int(params.band_width))
        else:
            base = rng.uniform(*diff.band_frac) * h * scale
            period = rng.uniform(0.5, 1.5) * w
            phase = rng.uniform(0, 2 * np.pi)
            prof = base * (1 + 0.3 * np.sin(2 * np.pi * np.arange(w) / period + phase))
            prof += rng.normal(0, 0.6, size=w)
            widths = np.clip(np.rint(prof), 1, None).astype(np.int64)
        band = on_edge & (ys < (edge + widths)[None, :]) & (ys >= edge[None, :])
        seg[band] = FLANK_WEAR
        streaks = rng.normal(0, 0.04, size=w)[None, :]
        img = np.where(band, diff.wear_level + streaks + rng.normal(0, 0.02, size=(h, w)), img)

    if params.chipping:
        n_notch = int(rng.integers(1, diff.max_notches + 1))
        span = edge_cols[-1] - edge_cols[0]
        for _ in range(n_notch):
            hw = max(1.5, rng.uniform(*diff.chip_halfwidth_frac) * w * scale)
            depth = max(2.0, rng.uniform(*diff.chip_depth_frac) * h * scale)
            c = edge_cols[0] + rng.uniform(0.1, 0.9) * span
            rel = (np.arange(w) - c) / hw
            prof = depth * np.clip(1 - rel**2, 0, None) ** 0.7
            prof = np.where(prof > 0, prof + rng.normal(0, 0.7, size=w), 0)
            d = np.clip(np.rint(prof), 0, None).astype(np.int64)
            notch = on_edge & (ys >= edge[None, :]) & (ys < (edge + d)[None, :])
            seg[notch] = CHIPPING
            img = np.where(notch, diff.chip_level + rng.normal(0, 0.03, size=(h, w)), img)

    if params.built_up_edge:
        for _ in range(int(rng.integers(1, 3))):
            cx = edge_cols[0] + rng.uniform(0.1, 0.9) * (edge_cols[-1] - edge_cols[0])
            rx = rng.uniform(0.04, 0.08) * w
            ry = rng.uniform(0.03, 0.06) * h
            cy = edge[int(np.clip(round(cx), 0, w - 1))]
            blob = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
            # deposits sit on top of the edge, outside the insert body
            blob &= (ys < edge[None, :]) & (xs >= left_bound)
            seg[blob] = TOOL
            img = np.where(blob, diff.bue_level + rng.normal(0, 0.05, size=(h, w)), img)

    g = rng.uniform(-diff.illumination, diff.illumination, size=2)
    light = 1 + g[0] * (xs / w - 0.5) + g[1] * (ys / h - 0.5)
    img = img * light + rng.normal(0, diff.noise_sigma, size=(h, w))
    return Raster(quantize(np.clip(img, 0.0, 1.0))), seg


# -- corpus ----------------------------------------------------------------------


def _quota(n, p, rng):
    """Exactly round(n*p) positives at random positions."""
    count = int(np.floor(n * p + 0.5))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:count]] = True
    return flags


def plan_labels(cfg: CorpusConfig):
    """Intended (flank, chip, bue) flags per sample.

    Each mechanism gets an exact quota placed independently of the others,
    so co-occurrence follows the product of the prevalences on average.
    """
    rng = np.random.default_rng([cfg.seed, 0x1AB])
    flank = _quota(cfg.n_images, cfg.p_flank, rng)
    chip = _quota(cfg.n_images, cfg.p_chip, rng)
    bue = _quota(cfg.n_images, cfg.p_bue, rng)
    return flank, chip, bue


def sample_id(index: int) -> str:
    return f"insert_{index:05d}"


def render_sample(cfg: CorpusConfig, index: int, flank: bool, chip: bool, bue: bool) -> Sample:
    """Render sample ``index`` from its own RNG substream.

    Draws are retried (with growing wear sizes) until the stored ground truth
    yields exactly the intended labels.
    """
    rng = np.random.default_rng([cfg.seed, index])
    for attempt in range(MAX_RENDER_ATTEMPTS):
        params = InsertParams(
            cfg.img_w, cfg.img_h, bool(flank), bool(chip), bool(bue), cfg.difficulty,
            size_scale=1.0 + 0.1 * attempt,
        )
        image, seg = render_insert(params, rng)
        labels = labels_from_segmap(seg, cfg.min_region_px, bue)
        if labels.flank_wear == flank and labels.chipping == chip:
            return Sample(sample_id(index), image, seg, labels)
    raise ConfigError(
        f"could not render sample {index} with the requested wear at "
        f"{cfg.img_w}x{cfg.img_h}; image too small for min_region_px={cfg.min_region_px}"
    )


def generate_samples(cfg: CorpusConfig, threads: int = 1):
    flank, chip, bue = plan_labels(cfg)
    jobs = [(cfg, i, flank[i], chip[i], bue[i]) for i in range(cfg.n_images)]
    if threads <= 1:
        return [render_sample(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: render_sample(*j), jobs))


def manifest_rows(samples):
    for s in samples:
        lab = s.labels
        yield {
            "id": s.id,
            "image": f"images/{s.id}.pgm",
            "segmap": f"segmaps/{s.id}.pgm",
            "flank_wear": int(lab.flank_wear),
            "chipping": int(lab.chipping),
            "no_wear": int(lab.no_wear),
            "built_up_edge": int(lab.built_up_edge),
        }


def generate_corpus(cfg: CorpusConfig, out_dir, threads: int = 1):
    """Write images, segmaps, ``manifest.csv`` and ``corpus.json`` under ``out_dir``.

    Returns the manifest rows.
    """
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "segmaps").mkdir(parents=True, exist_ok=True)
    samples = generate_samples(cfg, threads)
    rows = list(manifest_rows(samples))
    for s, row in zip(samples, rows):
        write_image(s.image, root / row["image"])
        write_image(Raster(s.segmap), root / row["segmap"])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (root / "manifest.csv").write_text(buf.getvalue(), encoding="utf-8")
    (root / "corpus.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return rows


def read_manifest(corpus_dir):
    path = os.path.join(corpus_dir, "manifest.csv")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for r in reader:
            for key in MANIFEST_FIELDS[3:]:
                r[key] = int(r[key])
            rows.append(r)
    return rows
