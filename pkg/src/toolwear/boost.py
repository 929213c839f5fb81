"""Gradient-boosted regression trees for binary targets (binomial deviance).

Each stage fits a depth-limited CART tree to the residuals ``y - p`` using the
Hessian ``p (1 - p)`` as sample weights, then replaces the leaf outputs by a
one-step Newton update ``sum(residual) / sum(hessian)``.  Split search is exact
and greedy over midpoints of sorted distinct values.

Trees are stored as flat pre-order arrays; a node with ``feature == -1`` is a
leaf.  Samples with ``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError, FormatError, ShapeMismatchError, TruncatedError

MODEL_MAGIC = b"WGBM"
LEAF_DENOM_FLOOR = 1e-12
# relative tolerance under which two split gains count as equal
GAIN_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class GbmConfig:
    n_stages: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 1
    feature_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 < self.feature_fraction <= 1:
            raise ValueError("feature_fraction must lie in (0, 1]")


@dataclass(eq=False)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray  # variance reduction per split; NaN when loaded from disk

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            n = node[inner]
            go_left = X[r, f[inner]].astype(np.float64) <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


class _TreeBuilder:
    def __init__(self):
        self.nodes = []

    def add(self, feature=-1, threshold=0.0, value=0.0, gain=0.0):
        self.nodes.append([feature, threshold, -1, -1, value, gain])
        return len(self.nodes) - 1

    def build(self) -> Tree:
        cols = list(zip(*self.nodes))
        return Tree(
            feature=np.array(cols[0], dtype=np.int64),
            threshold=np.array(cols[1], dtype=np.float64),
            left=np.array(cols[2], dtype=np.int64),
            right=np.array(cols[3], dtype=np.int64),
            value=np.array(cols[4], dtype=np.float64),
            gain=np.array(cols[5], dtype=np.float64),
        )


def _as_matrix(X) -> np.ndarray:
    X = getattr(X, "values", X)
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D feature matrix, got shape {X.shape}")
    return X


def presort(X):
    """Per-feature ascending sample order and the matching sorted values.

    Both arrays are shaped (n_features, n_samples).
    """
    X = _as_matrix(X)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T.astype(np.int32))
    values = np.ascontiguousarray(np.take_along_axis(X.T, order, axis=1))
    return order, values


@njit(cache=True)
def _split_gains(XS, S, w, wr, min_leaf):
    """Weighted-SSE reduction for every (feature row, split position).

    ``XS``/``S`` hold the node's feature values and sample ids in per-feature
    sorted order.  Position i sends the first i+1 samples left.  Invalid
    candidates (equal neighbours, too-small leaves) get -inf.
    """
    k, m = S.shape
    gain = np.full((k, m - 1), -np.inf)
    W = 0.0
    T = 0.0
    for i in range(m):
        W += w[S[0, i]]
        T += wr[S[0, i]]
    parent = T * T / W if W > 0 else 0.0
    for j in range(k):
        cw = 0.0
        cs = 0.0
        for i in range(m - 1):
            s = S[j, i]
            cw += w[s]
            cs += wr[s]
            if XS[j, i] < XS[j, i + 1] and i + 1 >= min_leaf and m - i - 1 >= min_leaf:
                g = -parent
                if cw > 0:
                    g += cs * cs / cw
                rw = W - cw
                if rw > 0:
                    rs = T - cs
                    g += rs * rs / rw
                gain[j, i] = g
    return gain


@njit(cache=True)
def _partition(S, XS, goes_left, n_left):
    """Stable split of every sorted row into left/right children."""
    k, m = S.shape
    SL = np.empty((k, n_left), S.dtype)
    SR = np.empty((k, m - n_left), S.dtype)
    XL = np.empty((k, n_left), XS.dtype)
    XR = np.empty((k, m - n_left), XS.dtype)
    for j in range(k):
        a = 0
        b = 0
        for i in range(m):
            s = S[j, i]
            if goes_left[s]:
                SL[j, a] = s
                XL[j, a] = XS[j, i]
                a += 1
            else:
                SR[j, b] = s
                XR[j, b] = XS[j, i]
                b += 1
    return SL, XL, SR, XR


def fit_tree(X, targets, weights, cfg: GbmConfig, features=None, presorted=None) -> Tree:
    """Fit one weighted least-squares regression tree with Newton leaf values.

    ``features`` restricts the split search to a sorted subset of column
    indices; ``presorted`` may pass a precomputed :func:`presort` of ``X``.
    """
    X = _as_matrix(X)
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n, d = X.shape
    if n == 0:
        raise DataError("cannot fit a tree on zero samples")
    if t.shape != (n,) or w.shape != (n,):
        raise ShapeMismatchError("targets and weights must have one entry per sample")
    if features is None:
        features = np.arange(d)
    features = np.asarray(features, dtype=np.int64)
    builder = _TreeBuilder()

    def leaf_value(idx):
        return float(t[idx].sum() / max(w[idx].sum(), LEAF_DENOM_FLOOR))

    if len(features) == 0 or cfg.max_depth == 0:
        builder.add(value=leaf_value(np.arange(n)))
        return builder.build()

    order, values = presort(X) if presorted is None else presorted
    if len(features) != d:
        order = order[features]
        values = values[features]
    wr = w * t

    def grow(S, XS, depth):
        idx = S[0]
        node = builder.add(value=leaf_value(idx))
        if depth >= cfg.max_depth:
            return node
        m = S.shape[1]
        if m < 2 * cfg.min_samples_leaf:
            return node
        gain = _split_gains(XS, S, w, wr, cfg.min_samples_leaf)
        best = gain.max()
        wi = w[idx]
        mean = (wi * t[idx]).sum() / wi.sum() if wi.sum() > 0 else 0.0
        parent_sse = float((wi * (t[idx] - mean) ** 2).sum())
        tol = GAIN_TIE_RTOL * max(parent_sse, 1e-300)
        if not best > tol:
            return node
        # first candidate within tolerance of the best: lowest feature, then lowest threshold
        flat = int(np.argmax(gain >= best - tol))
        row, pos = divmod(flat, m - 1)
        lo = float(XS[row, pos])
        hi = float(XS[row, pos + 1])
        thr = (lo + hi) / 2.0
        if not lo <= thr < hi:
            thr = lo
        goes_left = np.zeros(n, dtype=np.bool_)
        goes_left[S[row, : pos + 1]] = True
        SL, XL, SR, XR = _partition(S, XS, goes_left, pos + 1)
        spec = builder.nodes[node]
        spec[0] = int(features[row])
        spec[1] = thr
        spec[5] = float(gain[row, pos])
        spec[2] = grow(SL, XL, depth + 1)
        spec[3] = grow(SR, XR, depth + 1)
        return node

    grow(order, values, 0)
    return builder.build()


# -- ensemble --------------------------------------------------------------------


def sigmoid(m):
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_loss(y, margins) -> float:
    """Mean binomial deviance / 2, computed stably from margins."""
    y = np.asarray(y, dtype=np.float64)
    m = np.asarray(margins, dtype=np.float64)
    # log(1 + exp(m)) - y m
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


@dataclass(eq=False)
class Ensemble:
    initial_margin: float
    learning_rate: float
    n_features: int
    trees: list = field(default_factory=list)


def fit_gbm(X, y, cfg: GbmConfig = GbmConfig()) -> Ensemble:
    X = _as_matrix(X)
    y = np.asarray(y)
    n, d = X.shape
    if y.shape != (n,):
        raise ShapeMismatchError(f"{y.shape[0] if y.ndim else 0} labels for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    y = y.astype(np.float64)
    p_bar = y.mean()
    if p_bar in (0.0, 1.0):
        raise DataError("both classes must be present to fit a boosted classifier")
    f0 = float(np.log(p_bar / (1.0 - p_bar)))
    ens = Ensemble(f0, float(cfg.learning_rate), d)

    presorted = presort(X)
    rng = np.random.default_rng(cfg.seed)
    n_sub = max(1, int(round(cfg.feature_fraction * d)))
    F = np.full(n, f0)
    for _ in range(cfg.n_stages):
        p = sigmoid(F)
        resid = y - p
        hess = p * (1.0 - p)
        feats = None
        if n_sub < d:
            feats = np.sort(rng.choice(d, size=n_sub, replace=False))
        tree = fit_tree(X, resid, hess, cfg, features=feats, presorted=presorted)
        ens.trees.append(tree)
        F = F + cfg.learning_rate * tree.predict(X)
    return ens


def _check_dims(e: Ensemble, X):
    if X.shape[1] != e.n_features:
        raise ShapeMismatchError(f"model expects {e.n_features} features, got {X.shape[1]}")


def predict_margins(e: Ensemble, X) -> np.ndarray:
    X = _as_matrix(X)
    _check_dims(e, X)
    total = np.zeros(X.shape[0])
    for tree in e.trees:
        total += tree.predict(X)
    return e.initial_margin + e.learning_rate * total


def staged_margins(e: Ensemble, X):
    """Yield the margin vector after each boosting stage (stage 0 = prior)."""
    X = _as_matrix(X)
    _check_dims(e, X)
    F = np.full(X.shape[0], e.initial_margin)
    yield F.copy()
    for tree in e.trees:
        F = F + e.learning_rate * tree.predict(X)
        yield F.copy()


def predict_margin(e: Ensemble, x) -> float:
    x = np.asarray(x)
    if x.ndim != 1:
        raise ShapeMismatchError("expected a single feature vector")
    return float(predict_margins(e, x[None, :])[0])


def predict_proba(e: Ensemble, x) -> float:
    return float(sigmoid(predict_margin(e, x)))


def predict_label(e: Ensemble, x) -> int:
    return int(predict_margin(e, x) >= 0.0)


def predict_labels(e: Ensemble, X) -> np.ndarray:
    return (predict_margins(e, X) >= 0.0).astype(np.int64)


def feature_importances(e: Ensemble) -> np.ndarray:
    scores = np.zeros(e.n_features)
    for tree in e.trees:
        split = tree.feature >= 0
        if np.isnan(tree.gain[split]).any():
            raise ValueError("split gains are unavailable for models loaded from disk")
        np.add.at(scores, tree.feature[split], tree.gain[split])
    total = scores.sum()
    return scores / total if total > 0 else scores


# -- serialization ---------------------------------------------------------------


def _pack_tree(tree: Tree, node: int, out: list):
    if tree.feature[node] < 0:
        out.append(struct.pack("<Bd", 0, tree.value[node]))
        return
    out.append(struct.pack("<BId", 1, int(tree.feature[node]), tree.threshold[node]))
    _pack_tree(tree, tree.left[node], out)
    _pack_tree(tree, tree.right[node], out)


def dumps_model(e: Ensemble) -> bytes:
    out = [
        MODEL_MAGIC,
        struct.pack("<IddII", 1, e.initial_margin, e.learning_rate, e.n_features, len(e.trees)),
    ]
    for tree in e.trees:
        _pack_tree(tree, 0, out)
    return b"".join(out)


def save_model(e: Ensemble, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_model(e))


def loads_model(blob: bytes, source="<bytes>") -> Ensemble:
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{source}: not a WGBM model file")
    head = struct.calcsize("<IddII")
    if len(blob) < 4 + head:
        raise TruncatedError(f"{source}: truncated header")
    version, f0, lr, n_features, n_trees = struct.unpack_from("<IddII", blob, 4)
    if version != 1:
        raise FormatError(f"{source}: unsupported model version {version}")
    pos = 4 + head

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise TruncatedError(f"{source}: truncated tree data")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    def read_node(b: _TreeBuilder, depth: int):
        if depth > 64:
            raise FormatError(f"{source}: tree nesting too deep")
        (tag,) = read("<B")
        if tag == 0:
            (value,) = read("<d")
            return b.add(value=value)
        if tag != 1:
            raise FormatError(f"{source}: bad node tag {tag}")
        feat, thr = read("<Id")
        if feat >= n_features:
            raise FormatError(f"{source}: split feature {feat} out of range")
        node = b.add(feature=feat, threshold=thr, gain=np.nan)
        b.nodes[node][2] = read_node(b, depth + 1)
        b.nodes[node][3] = read_node(b, depth + 1)
        return node

    trees = []
    for _ in range(n_trees):
        b = _TreeBuilder()
        read_node(b, 0)
        trees.append(b.build())
    if pos != len(blob):
        raise FormatError(f"{source}: {len(blob) - pos} trailing bytes")
    return Ensemble(f0, lr, n_features, trees)


def load_model(path) -> Ensemble:
    with open(path, "rb") as fh:
        return loads_model(fh.read(), str(path))
