"""Confusion matrices, MCC, stratified splitting, cross-validation and IoU."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import boost
from .errors import DataError, ShapeMismatchError

WEAR_CLASSES = (2, 3)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 0.0


def confusion(y_true, y_pred) -> ConfusionMatrix:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape != p.shape or t.ndim != 1:
        raise ShapeMismatchError(f"label vectors differ in shape: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("cannot build a confusion matrix from zero samples")
    return ConfusionMatrix(
        tp=int(np.sum(t & p)),
        fp=int(np.sum(~t & p)),
        fn=int(np.sum(t & ~p)),
        tn=int(np.sum(~t & ~p)),
    )


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0.0 when any marginal is empty."""
    denom = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if denom == 0:
        return 0.0
    value = (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)
    return max(-1.0, min(1.0, value))


# -- splitting -------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: np.ndarray

    def indices(self, fold: int):
        """(train, test) index arrays for one fold."""
        test = np.flatnonzero(self.fold_of == fold)
        train = np.flatnonzero(self.fold_of != fold)
        return train, test


def stratified_kfold(labels, k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle each class with a seeded RNG, then deal samples round-robin.

    Dealing continues across classes (the negatives start where the
    positives stopped) so fold sizes stay within one of each other too.
    """
    y = np.asarray(labels).astype(np.int64)
    if k < 2:
        raise ValueError("k must be at least 2")
    if y.size < k:
        raise DataError(f"{y.size} samples cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.full(y.size, -1, dtype=np.int64)
    offset = 0
    for cls in (1, 0):
        members = np.flatnonzero(y == cls)
        if members.size < k:
            raise DataError(f"class {cls} has {members.size} members, fewer than k={k}")
        members = rng.permutation(members)
        fold_of[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k
    if np.any(fold_of < 0):
        raise DataError("labels must be binary (0/1)")
    return FoldAssignment(k, fold_of)


def _largest_remainder(total: int, fractions) -> list:
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    short = total - sum(counts)
    by_remainder = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in by_remainder[:short]:
        counts[i] += 1
    return counts


def train_val_test_split(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Stratified three-way split into disjoint, exhaustive index sets.

    Each class is shuffled and spread evenly over a common ordering, which is
    then cut into consecutive chunks sized by largest remainder.
    """
    y = np.asarray(labels).astype(np.int64)
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = y.size
    rng = np.random.default_rng(seed)
    keys = np.empty(n)
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if members.size < 3:
            raise DataError(f"class {cls} has {members.size} members; each set needs at least one")
        members = rng.permutation(members)
        keys[members] = (np.arange(members.size) + 0.5) / members.size
    # ties between classes resolve by class id, then index
    ordering = np.lexsort((np.arange(n), y, keys))
    sizes = _largest_remainder(n, fr)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.sort(part) for part in np.split(ordering, cuts))


# -- cross-validation ------------------------------------------------------------


@dataclass
class CvReport:
    task: str
    k: int
    per_fold: list = field(default_factory=list)  # list of (ConfusionMatrix, mcc)
    pooled: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    @property
    def pooled_mcc(self) -> float:
        return mcc(self.pooled)

    def to_dict(self) -> dict:
        folds = []
        for i, (cm, m) in enumerate(self.per_fold):
            folds.append({"fold": i, "tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn, "mcc": m})
        p = self.pooled
        return {
            "task": self.task,
            "k": self.k,
            "per_fold": folds,
            "pooled": {
                "tp": p.tp, "fp": p.fp, "fn": p.fn, "tn": p.tn,
                "mcc": self.pooled_mcc,
                "precision": p.precision, "recall": p.recall, "f1": p.f1,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CvReport":
        rep = cls(d["task"], int(d["k"]))
        for f in d["per_fold"]:
            rep.per_fold.append(
                (ConfusionMatrix(f["tp"], f["fp"], f["fn"], f["tn"]), float(f["mcc"]))
            )
        p = d["pooled"]
        rep.pooled = ConfusionMatrix(p["tp"], p["fp"], p["fn"], p["tn"])
        return rep


class MajorityClassifier:
    """Baseline that always predicts the training majority (ties -> positive)."""

    def fit(self, X, y):
        self.label_ = int(np.mean(y) >= 0.5)
        return self

    def predict(self, X):
        return np.full(np.shape(X)[0], self.label_, dtype=np.int64)


class GbmClassifier:
    def __init__(self, cfg: boost.GbmConfig = boost.GbmConfig()):
        self.cfg = cfg

    def fit(self, X, y):
        self.model_ = boost.fit_gbm(X, y, self.cfg)
        return self

    def predict(self, X):
        return boost.predict_labels(self.model_, X)


def cross_validate(features, labels, k: int = 3, gbm_cfg=None, seed: int = 0,
                   task: str = "", classifier_factory=None) -> CvReport:
    """Stratified k-fold evaluation; each fold's model never sees its test rows.

    ``classifier_factory`` builds a fresh object with ``fit``/``predict`` per
    fold; by default a boosted classifier using ``gbm_cfg``.
    """
    X = getattr(features, "values", features)
    y = np.asarray(labels).astype(np.int64)
    if X.shape[0] != y.size:
        raise ShapeMismatchError(f"{X.shape[0]} feature rows for {y.size} labels")
    if classifier_factory is None:
        cfg = gbm_cfg if gbm_cfg is not None else boost.GbmConfig()
        classifier_factory = lambda: GbmClassifier(cfg)  # noqa: E731
    folds = stratified_kfold(y, k, seed)
    report = CvReport(task, k)
    for f in range(k):
        train, test = folds.indices(f)
        clf = classifier_factory().fit(X[train], y[train])
        cm = confusion(y[test], clf.predict(X[test]))
        report.per_fold.append((cm, mcc(cm)))
        report.pooled = report.pooled + cm
    return report


# -- segmentation metrics --------------------------------------------------------


def iou(truth, pred, cls: int) -> float:
    """Pixel IoU for one class; 1.0 when the class is absent from both maps."""
    t = np.asarray(truth)
    p = np.asarray(pred)
    if t.shape != p.shape:
        raise ShapeMismatchError(f"segmap shapes differ: {t.shape} vs {p.shape}")
    tc = t == cls
    pc = p == cls
    union = int(np.sum(tc | pc))
    if union == 0:
        return 1.0
    return int(np.sum(tc & pc)) / union


def mean_iou(truth, pred, classes=WEAR_CLASSES) -> float:
    return float(np.mean([iou(truth, pred, c) for c in classes]))


# -- report serialization --------------------------------------------------------

_FLOAT_TOKEN = re.compile(r'"__float__(-?[0-9.]+)"')


def _mark_floats(obj):
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError(f"cannot serialize non-finite value {obj!r}")
        return f"__float__{float(obj):.6f}"
    if isinstance(obj, dict):
        return {k: _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_mark_floats(v) for v in obj]
    return obj


def dumps_report(obj) -> str:
    """JSON with every float written with exactly six decimals."""
    text = json.dumps(_mark_floats(obj), indent=2)
    return _FLOAT_TOKEN.sub(lambda m: m.group(1), text) + "\n"


def write_report(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(obj))
