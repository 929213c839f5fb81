"""Pipeline stages behind the CLI subcommands.

Every stage reads and writes files below a run directory laid out by
``PipelineConfig.paths``.  Outputs are pure functions of the config: worker
threads only change wall-clock time, and BLAS is pinned to one thread so
floating-point reductions never depend on the machine's core count.
"""

from __future__ import annotations

import functools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import boost, evalkit, seg
from .config import PipelineConfig
from .convfeat import (
    ConvBase,
    build_conv_base,
    extract_features,
    load_feature_cache,
    save_feature_cache,
    stack_features,
)
from .errors import DataError, ShapeMismatchError
from .measure import VB_CRITERION_MM, heatmap, wear_width_stats
from .raster import Raster, normalize, read_image, read_segmap, resize_bilinear, write_image, write_segmap
from .synthgen import generate_corpus, read_manifest

log = logging.getLogger(__name__)

TARGETS = ("flank_wear", "chipping")


def single_blas_thread(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with threadpool_limits(limits=1):
            return fn(*args, **kwargs)

    return wrapper


def ordered_map(fn, items, threads: int = 1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


class Run:
    """Resolved file locations for one run directory."""

    def __init__(self, cfg: PipelineConfig, out_dir):
        self.cfg = cfg
        self.root = Path(out_dir)
        p = cfg.paths
        self.corpus = self.root / p.corpus
        self.cache = self.root / p.cache
        self.models = self.root / p.models
        self.reports = self.root / p.reports
        self.segment = self.root / p.segment

    def model_path(self, target: str) -> Path:
        return self.models / f"{target}.wgbm"

    def crossval_path(self, target: str, dummy: str | None = None) -> Path:
        suffix = f"_{dummy}" if dummy else ""
        return self.reports / f"crossval_{target}{suffix}.json"

    def manifest(self):
        if not (self.corpus / "manifest.csv").exists():
            raise FileNotFoundError(f"no corpus at {self.corpus} (run 'generate' first)")
        return read_manifest(self.corpus)


def conv_base(cfg: PipelineConfig) -> ConvBase:
    return build_conv_base(cfg.base_spec)


def preprocess(image: Raster, resize_to) -> np.ndarray:
    w, h = resize_to
    if (image.width, image.height) != (w, h):
        image = resize_bilinear(image, w, h)
    return normalize(image)


def _labels(rows, target: str) -> np.ndarray:
    if target not in TARGETS:
        raise DataError(f"unknown target {target!r}; choose from {TARGETS}")
    y = np.array([r[target] for r in rows], dtype=np.int64)
    if y.min() == y.max():
        raise DataError(f"target {target!r} has a single class in this corpus")
    return y


# -- stages ------------------------------------------------------------------------


def cmd_generate(cfg: PipelineConfig, out_dir, threads: int = 1, echo=print):
    run = Run(cfg, out_dir)
    rows = generate_corpus(cfg.corpus, run.corpus, threads=threads)
    echo(format_prevalence(rows))
    return rows


def prevalence(rows) -> dict:
    n = len(rows)
    out = {"n_images": n}
    for key in ("flank_wear", "chipping", "no_wear", "built_up_edge"):
        count = sum(int(r[key]) for r in rows)
        out[key] = {"count": count, "relative": count / n if n else 0.0}
    return out


def format_prevalence(rows) -> str:
    prev = prevalence(rows)
    names = {"flank_wear": "Flank wear", "chipping": "Chipping",
             "no_wear": "No wear", "built_up_edge": "Built-up edge"}
    lines = [f"{'Wear mechanism':<16} Frequency (relative)   n={prev['n_images']}"]
    for key, label in names.items():
        lines.append(f"{label:<16} {prev[key]['count']} ({100 * prev[key]['relative']:.2f}%)")
    return "\n".join(lines)


@single_blas_thread
def cmd_extract(cfg: PipelineConfig, out_dir, threads: int = 1):
    run = Run(cfg, out_dir)
    rows = run.manifest()
    base = conv_base(cfg)

    def one(row):
        image = read_image(run.corpus / row["image"])
        return extract_features(base, preprocess(image, cfg.resize_to))

    vectors = ordered_map(one, rows, threads)
    fm = stack_features(vectors, [r["id"] for r in rows])
    run.cache.parent.mkdir(parents=True, exist_ok=True)
    save_feature_cache(fm, run.cache)
    log.info("wrote %d x %d features to %s", fm.n_samples, fm.n_features, run.cache)
    return fm


def _load_aligned(run: Run):
    rows = run.manifest()
    if not run.cache.exists():
        raise FileNotFoundError(f"no feature cache at {run.cache} (run 'extract' first)")
    fm = load_feature_cache(run.cache)
    if fm.ids != [r["id"] for r in rows]:
        raise DataError("feature cache rows do not match the corpus manifest; re-run 'extract'")
    return rows, fm


def cmd_crossval(cfg: PipelineConfig, out_dir, target: str, dummy: str | None = None):
    run = Run(cfg, out_dir)
    rows, fm = _load_aligned(run)
    y = _labels(rows, target)
    factory = None
    if dummy == "majority":
        factory = evalkit.MajorityClassifier
    elif dummy is not None:
        raise DataError(f"unknown dummy mode {dummy!r}")
    task = target if dummy is None else f"{target}/{dummy}"
    with threadpool_limits(limits=1):
        report = evalkit.cross_validate(
            fm, y, cfg.k_folds, cfg.gbm, seed=cfg.cv_seed, task=task, classifier_factory=factory
        )
    run.reports.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(report.to_dict(), run.crossval_path(target, dummy))
    return report


def cmd_train(cfg: PipelineConfig, out_dir, target: str):
    run = Run(cfg, out_dir)
    rows, fm = _load_aligned(run)
    model = boost.fit_gbm(fm, _labels(rows, target), cfg.gbm)
    run.models.mkdir(parents=True, exist_ok=True)
    boost.save_model(model, run.model_path(target))
    return model


@single_blas_thread
def cmd_predict(cfg: PipelineConfig, model_path, image_path):
    """Return (label, probability) for one image."""
    model = boost.load_model(model_path)
    image = read_image(image_path)
    x = extract_features(conv_base(cfg), preprocess(image, cfg.resize_to))
    if x.size != model.n_features:
        raise ShapeMismatchError(
            f"model expects {model.n_features} features but the image gives {x.size}; "
            "check resize_to"
        )
    p = boost.predict_proba(model, x)
    return int(p >= 0.5), p


def _pooled_iou(truths, preds, cls):
    inter = union = 0
    for t, p in zip(truths, preds):
        inter += int(np.sum((t == cls) & (p == cls)))
        union += int(np.sum((t == cls) | (p == cls)))
    return inter / union if union else 1.0


def _iou_summary(truths, preds):
    out = {}
    for cls, name in seg.WEAR_TARGETS.items():
        out[name] = {
            "pooled": _pooled_iou(truths, preds, cls),
            "per_image_mean": float(np.mean([evalkit.iou(t, p, cls) for t, p in zip(truths, preds)])),
        }
    out["mean_pooled"] = float(np.mean([out[n]["pooled"] for n in seg.WEAR_TARGETS.values()]))
    return out


@single_blas_thread
def cmd_segment(cfg: PipelineConfig, out_dir, threads: int = 1):
    """Train the cell-wise baseline on the train split; score val and test."""
    run = Run(cfg, out_dir)
    rows = run.manifest()
    strat = np.array([r["flank_wear"] for r in rows], dtype=np.int64)
    train, val, test = evalkit.train_val_test_split(strat, cfg.split_fractions, seed=cfg.cv_seed)
    base = conv_base(cfg)

    def load(i):
        r = rows[i]
        return read_image(run.corpus / r["image"]), read_segmap(run.corpus / r["segmap"])

    train_data = ordered_map(load, train, threads)
    model = seg.train_cell_model(
        base,
        [d[0] for d in train_data],
        [d[1] for d in train_data],
        cfg.seg_block,
        cfg.gbm,
        max_cells=cfg.seg_max_cells,
        seed=cfg.gbm.seed,
    )
    seg.save_cell_model(model, run.models)

    pred_dir = run.segment / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "block": cfg.seg_block,
        "split": {"train": len(train), "val": len(val), "test": len(test)},
        "iou": {},
    }
    for name, idx in (("val", val), ("test", test)):
        data = ordered_map(load, idx, threads)
        preds = ordered_map(lambda d: seg.segment_cellwise(base, model, d[0]), data, threads)
        for i, p in zip(idx, preds):
            write_segmap(p, pred_dir / f"{rows[i]['id']}.pgm")
        report["iou"][name] = _iou_summary([d[1] for d in data], preds)
        report[f"{name}_ids"] = [rows[i]["id"] for i in idx]
    run.reports.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(report, run.reports / "segment.json")
    return report


def _default_maps(run: Run):
    rows = run.manifest()
    return [r["id"] for r in rows], [run.corpus / r["segmap"] for r in rows]


def cmd_measure(cfg: PipelineConfig, out_dir, maps=None):
    """VB statistics per segmentation map (ground truth by default)."""
    run = Run(cfg, out_dir)
    if maps:
        ids, paths = [Path(m).stem for m in maps], [Path(m) for m in maps]
    else:
        ids, paths = _default_maps(run)
    px = cfg.corpus.px_per_mm
    samples = []
    for sid, path in zip(ids, paths):
        st = wear_width_stats(read_segmap(path), px)
        samples.append({"id": sid, **st.to_dict()})
    vb = np.array([s["vb_max"] for s in samples]) if samples else np.zeros(1)
    worn = vb[vb > 0]
    report = {
        "px_per_mm": px,
        "criterion_mm": VB_CRITERION_MM,
        "n_maps": len(samples),
        "exceedance_rate": float(np.mean([s["exceeds_criterion"] for s in samples])) if samples else 0.0,
        "vb_max_distribution": {
            "n_worn": int(worn.size),
            "min": float(worn.min()) if worn.size else 0.0,
            "median": float(np.median(worn)) if worn.size else 0.0,
            "mean": float(worn.mean()) if worn.size else 0.0,
            "max": float(worn.max()) if worn.size else 0.0,
        },
        "samples": samples,
    }
    run.reports.mkdir(parents=True, exist_ok=True)
    evalkit.write_report(report, run.reports / "measure.json")
    return report


def cmd_heatmap(cfg: PipelineConfig, out_dir, maps=None, cls: int = 2, output=None) -> Raster:
    run = Run(cfg, out_dir)
    paths = [Path(m) for m in maps] if maps else _default_maps(run)[1]
    image = heatmap([read_segmap(p) for p in paths], cls)
    output = Path(output) if output else run.reports / f"heatmap_class{cls}.pgm"
    output.parent.mkdir(parents=True, exist_ok=True)
    write_image(image, output)
    return image


def _read_json(path: Path, missing: list):
    if not path.exists():
        missing.append(str(path))
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_report(cfg: PipelineConfig, out_dir):
    """Consolidate prevalence, MCC, IoU and VB statistics into one summary."""
    run = Run(cfg, out_dir)
    rows = run.manifest()
    missing = []
    cv = {t: _read_json(run.crossval_path(t), missing) for t in TARGETS}
    segment = _read_json(run.reports / "segment.json", missing)
    measure = _read_json(run.reports / "measure.json", missing)
    if missing:
        raise FileNotFoundError("missing report inputs: " + ", ".join(missing))

    summary = {
        "prevalence": prevalence(rows),
        "classification": {
            t: {"k": cv[t]["k"], "pooled_mcc": cv[t]["pooled"]["mcc"], "pooled": cv[t]["pooled"]}
            for t in TARGETS
        },
        "segmentation": segment["iou"],
        "flank_wear_width": {
            "criterion_mm": measure["criterion_mm"],
            "exceedance_rate": measure["exceedance_rate"],
            "vb_max_distribution": measure["vb_max_distribution"],
        },
    }
    evalkit.write_report(summary, run.reports / "summary.json")
    text = format_summary(summary)
    (run.reports / "summary.txt").write_text(text, encoding="utf-8")
    return summary, text


def format_summary(s: dict) -> str:
    prev = s["prevalence"]
    lines = ["== Wear characterization report ==", "", f"Images: {prev['n_images']}"]
    for key in ("flank_wear", "chipping", "no_wear", "built_up_edge"):
        lines.append(f"  {key:<14} {prev[key]['count']:>5} ({100 * prev[key]['relative']:.2f}%)")
    lines += ["", "Classification (pooled over folds):"]
    for t, c in s["classification"].items():
        p = c["pooled"]
        lines.append(
            f"  {t:<14} MCC {c['pooled_mcc']:.3f}  tp={p['tp']} fn={p['fn']} fp={p['fp']} tn={p['tn']}"
        )
    lines += ["", "Segmentation IoU (pooled pixels):"]
    for split, res in s["segmentation"].items():
        lines.append(
            f"  {split:<5} flank_wear {res['flank_wear']['pooled']:.3f}  "
            f"chipping {res['chipping']['pooled']:.3f}  mean {res['mean_pooled']:.3f}"
        )
    fw = s["flank_wear_width"]
    d = fw["vb_max_distribution"]
    lines += [
        "",
        f"Flank wear width (criterion {fw['criterion_mm']:.1f} mm):",
        f"  VB_max over {d['n_worn']} worn maps: min {d['min']:.3f}  median {d['median']:.3f}  "
        f"mean {d['mean']:.3f}  max {d['max']:.3f} mm",
        f"  exceedance rate {100 * fw['exceedance_rate']:.2f}%",
    ]
    return "\n".join(lines) + "\n"


def run_all(cfg: PipelineConfig, out_dir, threads: int = 1, echo=print):
    cmd_generate(cfg, out_dir, threads, echo=echo)
    cmd_extract(cfg, out_dir, threads)
    for t in TARGETS:
        cmd_crossval(cfg, out_dir, t)
        cmd_train(cfg, out_dir, t)
    cmd_segment(cfg, out_dir, threads)
    cmd_measure(cfg, out_dir)
    cmd_heatmap(cfg, out_dir, cls=2)
    cmd_heatmap(cfg, out_dir, cls=3)
    summary, text = cmd_report(cfg, out_dir)
    echo(text)
    return summary
