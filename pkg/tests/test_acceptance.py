"""Acceptance checks, one group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion together with the measured values.
"""

import filecmp
import json
import time

import numpy as np
import pytest

from oracles import best_stump, conv2d_loops
from toolwear import pipeline
from toolwear.boost import GbmConfig, fit_gbm, fit_tree, log_loss, staged_margins
from toolwear.config import config_from_dict
from toolwear.convfeat import ConvLayer, conv2d, extract_features, random_base
from toolwear.evalkit import ConfusionMatrix, confusion, iou, mcc, stratified_kfold
from toolwear.measure import wear_width_stats
from toolwear.raster import Raster, augment, normalize
from toolwear.synthgen import FLANK_WEAR, InsertParams, render_insert


# -- AC1 --------------------------------------------------------------------------


def test_ac1_reference_mcc(record_property):
    flank = mcc(ConfusionMatrix(tp=532, fn=4, fp=18, tn=94))
    chip = mcc(ConfusionMatrix(tp=292, fn=67, fp=48, tn=241))
    record_property("measured", f"flank {flank:.4f}, chipping {chip:.4f}")
    assert abs(flank - 0.878) <= 0.001
    assert abs(chip - 0.644) <= 0.001


# -- AC2 --------------------------------------------------------------------------


def test_ac2_feature_count_640x480(record_property):
    base = random_base(0)
    img = Raster(np.random.default_rng(0).integers(0, 256, (480, 640), dtype=np.uint8))
    t0 = time.perf_counter()
    f = extract_features(base, normalize(img))
    dt = time.perf_counter() - t0
    record_property("measured", f"{f.size} values in {dt:.1f}s")
    assert f.size == 153_600
    assert dt <= 60


# -- AC3 --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cv_reports(easy_run):
    cfg, out = easy_run
    t0 = time.perf_counter()
    reps = {t: pipeline.cmd_crossval(cfg, out, t) for t in pipeline.TARGETS}
    reps["dummy"] = pipeline.cmd_crossval(cfg, out, "flank_wear", dummy="majority")
    reps["dummy_chip"] = pipeline.cmd_crossval(cfg, out, "chipping", dummy="majority")
    return reps, time.perf_counter() - t0


def test_ac3_flank_mcc(cv_reports, record_property):
    rep = cv_reports[0]["flank_wear"]
    record_property("measured", f"flank MCC {rep.pooled_mcc:.3f}")
    assert rep.k == 3 and rep.pooled.total == 648
    assert rep.pooled_mcc >= 0.9


def test_ac3_chipping_mcc(cv_reports, record_property):
    rep = cv_reports[0]["chipping"]
    record_property("measured", f"chipping MCC {rep.pooled_mcc:.3f}")
    assert rep.pooled_mcc >= 0.7


def test_ac3_majority_dummy_zero(cv_reports, record_property):
    reps, dt = cv_reports
    record_property("measured", f"dummy MCC {reps['dummy'].pooled_mcc}, {reps['dummy_chip'].pooled_mcc}")
    assert reps["dummy"].pooled_mcc == 0.0
    assert reps["dummy_chip"].pooled_mcc == 0.0


# -- AC4 --------------------------------------------------------------------------


def test_ac4_stump_oracle_200(record_property):
    rng = np.random.default_rng(2024)
    cfg = GbmConfig(max_depth=1)
    splits = 0
    for i in range(200):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        if i % 2:
            # coarse integer grid: frequent ties in values and gains
            X = rng.integers(0, 4, (n, d)).astype(float)
            t = rng.integers(-3, 4, n).astype(float)
        else:
            X = rng.normal(size=(n, d))
            t = rng.normal(size=n)
        w = rng.uniform(0.01, 0.25, n)
        tree = fit_tree(X, t, w, cfg)
        want = best_stump(X, t, w)
        if want is None:
            assert tree.n_nodes == 1, i
            assert abs(tree.value[0] - t.sum() / w.sum()) <= 1e-9
            continue
        splits += 1
        f, thr, lv, rv = want
        assert (int(tree.feature[0]), float(tree.threshold[0])) == (f, thr), i
        assert abs(tree.value[tree.left[0]] - lv) <= 1e-9 * max(1.0, abs(lv))
        assert abs(tree.value[tree.right[0]] - rv) <= 1e-9 * max(1.0, abs(rv))
    record_property("measured", f"200 stumps ({splits} with a split)")


def test_ac4_conv_oracle_100(record_property):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(100):
        c_in, c_out = (int(v) for v in rng.integers(1, 5, 2))
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        layer = ConvLayer(rng.uniform(-1, 1, (c_out, c_in, 3, 3)), rng.uniform(-1, 1, c_out))
        x = rng.uniform(-1, 1, (c_in, h, w)).astype(np.float32)
        ref = conv2d_loops(x, layer.weight, layer.bias)
        worst = max(worst, float(np.abs(conv2d(x, layer) - ref).max()))
    record_property("measured", f"max |diff| {worst:.2e}")
    assert worst <= 1e-6


# -- AC5 --------------------------------------------------------------------------


def test_ac5_mcc_properties():
    rng = np.random.default_rng(5)
    for _ in range(500):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 300, 4))
        assert -1.0 <= mcc(ConfusionMatrix(tp, fp, fn, tn)) <= 1.0
    for _ in range(100):
        y = rng.integers(0, 2, int(rng.integers(2, 50)))
        if 0 < y.sum() < y.size:
            assert mcc(confusion(y, y)) == 1.0
            assert mcc(confusion(y, 1 - y)) == -1.0


def test_ac5_fold_properties():
    rng = np.random.default_rng(6)
    for _ in range(200):
        k = int(rng.integers(2, 6))
        n_pos, n_neg = (int(v) for v in rng.integers(k, 60, 2))
        y = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)])
        folds = stratified_kfold(y, k, seed=int(rng.integers(1 << 30)))
        tests = [folds.indices(f)[1] for f in range(k)]
        assert sorted(np.concatenate(tests).tolist()) == list(range(y.size))
        for cls in (0, 1):
            counts = [int(np.sum(y[t] == cls)) for t in tests]
            assert max(counts) - min(counts) <= 1


def test_ac5_iou_constructed_overlap():
    t = np.zeros((10, 20), np.uint8)
    p = np.zeros_like(t)
    t[:, 0:10] = FLANK_WEAR
    p[:, 5:15] = FLANK_WEAR
    assert (t == FLANK_WEAR).sum() == 100 and (p == FLANK_WEAR).sum() == 100
    assert iou(t, p, FLANK_WEAR) == 50 / 150 == 1 / 3


def test_ac5_augmentation_involutions():
    rng = np.random.default_rng(7)
    for shape in [(5, 7), (6, 6, 3), (1, 9)]:
        r = Raster(rng.integers(0, 256, shape, dtype=np.uint8))
        m = rng.integers(0, 4, shape[:2], dtype=np.uint8)
        for op, times in (("flip_h", 2), ("flip_v", 2), ("rot90", 4)):
            r2, m2 = r, m
            for _ in range(times):
                r2, m2 = augment(r2, m2, op)
            assert r2 == r and np.array_equal(m2, m)


def test_ac5_training_loss_monotone(easy_run, record_property):
    cfg, out = easy_run
    from toolwear.convfeat import load_feature_cache
    from toolwear.synthgen import read_manifest

    fm = load_feature_cache(out / cfg.paths.cache)
    rows = read_manifest(out / cfg.paths.corpus)
    rng = np.random.default_rng(8)
    fixtures = []
    for seed in range(3):
        X = rng.normal(size=(150, 5))
        fixtures.append((X, (X[:, 0] - X[:, 1] + rng.normal(size=150) > 0).astype(int)))
    fixtures.append((np.arange(4.0)[:, None], np.array([0, 0, 1, 1])))
    sub = slice(0, 200)
    for target in pipeline.TARGETS:
        fixtures.append((fm.values[sub], np.array([r[target] for r in rows])[sub]))
    worst = -np.inf
    for X, y in fixtures:
        for cfg_g in (GbmConfig(n_stages=30), GbmConfig(n_stages=30, max_depth=1, learning_rate=0.5)):
            e = fit_gbm(X, y, cfg_g)
            losses = np.array([log_loss(y, F) for F in staged_margins(e, X)])
            worst = max(worst, float(np.diff(losses).max()))
    record_property("measured", f"largest per-stage loss change {worst:.2e}")
    assert worst <= 0.0


# -- AC6 --------------------------------------------------------------------------


def _all_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_ac6_thread_count_invariance(tmp_path, record_property):
    cfg = config_from_dict(
        {"corpus": {"n_images": 48, "seed": 11}, "gbm": {"n_stages": 15, "seed": 11},
         "cv_seed": 11, "seg_max_cells": 3000}
    )
    a, b = tmp_path / "t1", tmp_path / "t4"
    pipeline.run_all(cfg, a, threads=1, echo=lambda s: None)
    pipeline.run_all(cfg, b, threads=4, echo=lambda s: None)
    files = _all_files(a)
    assert files == _all_files(b)
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    record_property("measured", f"{len(files)} files compared, {len(mismatch)} differ")
    assert not mismatch and not errors
    kinds = {f.suffix for f in files}
    assert {".pgm", ".wfc", ".wgbm", ".json", ".csv"} <= kinds


# -- AC7 --------------------------------------------------------------------------


def test_ac7_segmentation_iou(easy_run, record_property):
    cfg, out = easy_run
    rep = pipeline.cmd_segment(cfg, out)
    test = rep["iou"]["test"]["flank_wear"]
    assert rep["split"] == {"train": 389, "val": 130, "test": 129}
    record_property(
        "measured",
        f"held-out flank IoU {test['pooled']:.3f} pooled, {test['per_image_mean']:.3f} per-image mean",
    )
    assert test["pooled"] >= 0.5
    saved = json.loads((out / "reports/segment.json").read_text())
    assert saved["iou"]["test"]["flank_wear"]["pooled"] == round(test["pooled"], 6)


def test_ac7_vb_constructed_band(record_property):
    _, seg = render_insert(InsertParams(200, 200, True, False, False, band_width=35),
                           np.random.default_rng(3))
    st = wear_width_stats(seg, px_per_mm=100)
    record_property("measured", f"vb_max {st.vb_max:.2f} mm, exceeds {st.exceeds_criterion}")
    assert st.vb_max == pytest.approx(0.35, abs=1e-12)
    assert st.exceeds_criterion is True
