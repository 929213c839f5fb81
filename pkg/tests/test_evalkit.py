import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mcc_formula
from toolwear.boost import GbmConfig
from toolwear.errors import DataError, ShapeMismatchError
from toolwear.evalkit import (
    ConfusionMatrix,
    CvReport,
    MajorityClassifier,
    confusion,
    cross_validate,
    dumps_report,
    iou,
    mcc,
    mean_iou,
    stratified_kfold,
    train_val_test_split,
    write_report,
)

binary_labels = st.lists(st.integers(0, 1), min_size=1, max_size=60)


class TestMcc:
    @settings(max_examples=200, deadline=None)
    @given(*(st.integers(0, 500) for _ in range(4)))
    def test_bounded_and_matches_formula(self, tp, fp, fn, tn):
        m = mcc(ConfusionMatrix(tp, fp, fn, tn))
        assert -1.0 <= m <= 1.0
        assert m == pytest.approx(mcc_formula(tp, fp, fn, tn), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(binary_labels)
    def test_perfect_and_inverted(self, y):
        y = np.array(y)
        both = 0 < y.sum() < y.size
        assert mcc(confusion(y, y)) == (1.0 if both else 0.0)
        assert mcc(confusion(y, 1 - y)) == (-1.0 if both else 0.0)

    def test_degenerate_marginals_are_zero(self):
        assert mcc(ConfusionMatrix(tp=10, fn=5)) == 0.0
        assert mcc(ConfusionMatrix(tn=7)) == 0.0

    def test_confusion_counts(self):
        cm = confusion([1, 1, 0, 0, 1], [1, 0, 1, 0, 1])
        assert (cm.tp, cm.fp, cm.fn, cm.tn) == (2, 1, 1, 1)
        assert cm.precision == pytest.approx(2 / 3) and cm.recall == pytest.approx(2 / 3)

    def test_confusion_errors(self):
        with pytest.raises(ShapeMismatchError):
            confusion([1, 0], [1])
        with pytest.raises(DataError):
            confusion([], [])

    def test_pooling_adds(self):
        a, b = ConfusionMatrix(1, 2, 3, 4), ConfusionMatrix(10, 20, 30, 40)
        assert a + b == ConfusionMatrix(11, 22, 33, 44)


class TestStratifiedKfold:
    @settings(max_examples=120, deadline=None)
    @given(st.integers(3, 80), st.integers(2, 5), st.integers(0, 2**31), st.data())
    def test_partition_properties(self, n, k, seed, data):
        n_pos = data.draw(st.integers(k, max(k, n - k)))
        if n - n_pos < k:
            return
        y = np.zeros(n, int)
        y[data.draw(st.permutations(range(n)))[:n_pos]] = 1
        folds = stratified_kfold(y, k, seed)
        tests = [folds.indices(f)[1] for f in range(k)]
        allidx = np.concatenate(tests)
        assert sorted(allidx.tolist()) == list(range(n))  # disjoint and exhaustive
        for f in range(k):
            train, test = folds.indices(f)
            assert not set(train) & set(test)
        for cls in (0, 1):
            counts = [int(np.sum(y[t] == cls)) for t in tests]
            assert max(counts) - min(counts) <= 1
        sizes = [len(t) for t in tests]
        assert max(sizes) - min(sizes) <= 1

    def test_seeded(self):
        y = np.array([0, 1] * 20)
        a = stratified_kfold(y, 3, seed=1).fold_of
        assert np.array_equal(a, stratified_kfold(y, 3, seed=1).fold_of)
        assert not np.array_equal(a, stratified_kfold(y, 3, seed=2).fold_of)

    def test_too_few_members(self):
        with pytest.raises(DataError):
            stratified_kfold([1, 1, 0, 0, 0, 0], 3)
        with pytest.raises(DataError):
            stratified_kfold([0, 0, 0, 0], 2)
        with pytest.raises(ValueError):
            stratified_kfold([0, 1], 1)


class TestThreeWaySplit:
    @settings(max_examples=80, deadline=None)
    @given(st.integers(6, 200), st.floats(0.1, 0.9), st.integers(0, 2**31))
    def test_properties(self, n, prevalence, seed):
        y = (np.arange(n) < max(3, min(n - 3, round(prevalence * n)))).astype(int)
        parts = train_val_test_split(y, (0.6, 0.2, 0.2), seed)
        merged = np.concatenate(parts)
        assert sorted(merged.tolist()) == list(range(n))
        expected = [0.6 * n, 0.2 * n, 0.2 * n]
        for p, e in zip(parts, expected):
            assert abs(len(p) - e) < 1
        for p, frac in zip(parts, (0.6, 0.2, 0.2)):
            assert abs(int(y[p].sum()) - frac * y.sum()) <= 1.5

    def test_sizes_largest_remainder(self):
        parts = train_val_test_split(np.array([0, 1] * 5 + [1]), seed=0)
        assert [len(p) for p in parts] == [7, 2, 2]

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            train_val_test_split([0, 1] * 5, (0.5, 0.5, 0.5))

    def test_small_class(self):
        with pytest.raises(DataError):
            train_val_test_split([0] * 10 + [1, 1])


class TestCrossValidate:
    def test_majority_dummy_is_zero(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 4))
        y = (np.arange(30) < 20).astype(int)
        rep = cross_validate(X, y, 3, classifier_factory=MajorityClassifier)
        assert rep.pooled_mcc == 0.0
        assert rep.pooled.tp + rep.pooled.fn == 20 and rep.pooled.total == 30

    def test_separable_problem(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 3))
        y = (X[:, 1] > 0).astype(int)
        rep = cross_validate(X, y, 3, GbmConfig(n_stages=20), task="toy")
        assert rep.pooled_mcc > 0.8 and len(rep.per_fold) == 3

    def test_folds_never_train_on_test_rows(self):
        seen = []

        class Spy(MajorityClassifier):
            def fit(self, X, y):
                seen.append(set(X[:, 0].astype(int)))
                return super().fit(X, y)

            def predict(self, X):
                assert not set(X[:, 0].astype(int)) & seen[-1]
                return super().predict(X)

        X = np.arange(24, dtype=float)[:, None]
        cross_validate(X, np.array([0, 1] * 12), 3, classifier_factory=Spy)
        assert len(seen) == 3

    def test_report_roundtrip(self):
        rep = CvReport("x", 2, [(ConfusionMatrix(1, 0, 0, 1), 1.0)] * 2, ConfusionMatrix(2, 0, 0, 2))
        d = json.loads(dumps_report(rep.to_dict()))
        assert CvReport.from_dict(d).pooled == rep.pooled
        assert d["pooled"]["mcc"] == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            cross_validate(np.zeros((5, 1)), [0, 1, 0], 2)


class TestIou:
    def test_constructed_overlap_is_one_third(self):
        # truth 100 px, prediction 100 px, overlap 50 px -> 50 / 150
        t = np.zeros((10, 20), np.uint8)
        p = np.zeros_like(t)
        t[:, :10] = 2
        p[:, 5:15] = 2
        assert iou(t, p, 2) == 1 / 3
        assert Fraction(iou(t, p, 2)).limit_denominator(1000) == Fraction(1, 3)

    def test_absent_everywhere_is_one(self):
        z = np.zeros((4, 4), np.uint8)
        assert iou(z, z, 3) == 1.0

    def test_disjoint_is_zero(self):
        t = np.array([[2, 0]], np.uint8)
        p = np.array([[0, 2]], np.uint8)
        assert iou(t, p, 2) == 0.0

    def test_mean_iou_and_shape(self):
        t = np.array([[2, 3]], np.uint8)
        assert mean_iou(t, t) == 1.0
        with pytest.raises(ShapeMismatchError):
            iou(t, t.T, 2)


class TestReportJson:
    def test_six_decimals(self):
        text = dumps_report({"a": 0.1, "b": [1, 2.5], "c": True, "d": "s", "e": np.float32(1 / 3)})
        assert '"a": 0.100000' in text and "2.500000" in text and "0.333333" in text
        assert '"c": true' in text and json.loads(text)["b"][0] == 1

    def test_nonfinite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_report({"x": float("nan")}, tmp_path / "r.json")
