"""Declarative pipeline configuration, loadable from JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .boost import GbmConfig
from .errors import ConfigError
from .synthgen import CorpusConfig


@dataclass(frozen=True)
class Paths:
    """Output locations, relative to the run directory (``--out``)."""

    corpus: str = "corpus"
    cache: str = "features.wfc"
    models: str = "models"
    reports: str = "reports"
    segment: str = "segment"


@dataclass(frozen=True)
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(img_w=1600, img_h=1200))
    resize_to: tuple = (640, 480)
    # {"mode": "random", "seed": int} or {"mode": "load", "path": str}
    base_init: dict = field(default_factory=lambda: {"mode": "random", "seed": 0})
    gbm: GbmConfig = field(default_factory=GbmConfig)
    k_folds: int = 3
    seg_block: int = 2
    seg_max_cells: int = 30000
    split_fractions: tuple = (0.6, 0.2, 0.2)
    cv_seed: int = 0
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        w, h = self.resize_to
        if w < 32 or h < 32:
            raise ConfigError(f"resize_to must be at least 32x32, got {w}x{h}")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if not 1 <= self.seg_block <= 5:
            raise ConfigError("seg_block must be in 1..5")
        if self.seg_max_cells < 1:
            raise ConfigError("seg_max_cells must be >= 1")
        mode = self.base_init.get("mode")
        if mode == "random":
            if not isinstance(self.base_init.get("seed", 0), int):
                raise ConfigError("base_init.seed must be an integer")
        elif mode == "load":
            if not isinstance(self.base_init.get("path"), str):
                raise ConfigError("base_init.path must name a weight file")
        else:
            raise ConfigError(f"base_init.mode must be 'random' or 'load', got {mode!r}")

    @classmethod
    def desk(cls) -> "PipelineConfig":
        """Laptop-scale profile: 648 easy 64x64 images, random-init base."""
        return cls(corpus=CorpusConfig(img_w=64, img_h=64), resize_to=(64, 64))

    @classmethod
    def full(cls) -> "PipelineConfig":
        """Reference-dataset geometry: 1600x1200 captures resized to 640x480."""
        return cls(corpus=CorpusConfig(img_w=1600, img_h=1200, difficulty="hard"))

    @property
    def base_spec(self):
        if self.base_init["mode"] == "random":
            return ("random", int(self.base_init.get("seed", 0)))
        return ("load", self.base_init["path"])

    def with_seed(self, seed: int) -> "PipelineConfig":
        base = dict(self.base_init)
        if base["mode"] == "random":
            base["seed"] = seed
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            gbm=replace(self.gbm, seed=seed),
            base_init=base,
            cv_seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resize_to"] = list(self.resize_to)
        d["split_fractions"] = list(self.split_fractions)
        return d


def _build(klass, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(klass)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return klass(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``data`` onto ``base`` (a profile); nested sections merge key-wise."""
    base = base or PipelineConfig.desk()
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    merged = base.to_dict()
    for key, value in data.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(merged[key], dict) and key != "base_init":
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a JSON object")
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    try:
        return PipelineConfig(
            corpus=_build(CorpusConfig, merged["corpus"], "corpus"),
            resize_to=tuple(int(v) for v in merged["resize_to"]),
            base_init=dict(merged["base_init"]),
            gbm=_build(GbmConfig, merged["gbm"], "gbm"),
            k_folds=int(merged["k_folds"]),
            seg_block=int(merged["seg_block"]),
            seg_max_cells=int(merged["seg_max_cells"]),
            split_fractions=tuple(float(v) for v in merged["split_fractions"]),
            cv_seed=int(merged["cv_seed"]),
            paths=_build(Paths, merged["paths"], "paths"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(data, base)
