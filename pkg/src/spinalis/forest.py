"""Random Forest (Gini, bootstrap, per-node feature subsampling) and per-pixel features."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Slice
from .fcm import FcmModel, defuzzify, fcm_predict

FOREST_FORMAT = "spinalis-forest/1"
_TIE = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 12
    min_samples_leaf: int = 5
    features_per_split: int | None = None  # None -> ceil(sqrt(F))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be positive")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be positive")


def gini(counts) -> float:
    """Gini impurity 1 - sum p_i^2 of a class-count vector."""
    c = np.asarray(counts, dtype=np.float64)
    if c.size == 0 or np.any(c < 0) or c.sum() <= 0:
        raise ValueError("gini needs nonnegative counts with a positive total")
    p = c / c.sum()
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    impurity: float  # weighted child Gini


def best_split(X, y, features=None, n_classes: int | None = None, min_samples_leaf: int = 1) -> Split | None:
    """Split minimising the weighted child Gini impurity.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values; samples with ``x <= threshold`` go left. Ties go to the lowest
    feature index, then the lowest threshold. Returns ``None`` when no
    candidate lowers the parent impurity.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < 2:
        return None
    k = int(n_classes if n_classes is not None else y.max() + 1)
    feats = range(X.shape[1]) if features is None else sorted(int(f) for f in features)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    parent = 1.0 - np.sum((total / n) ** 2)
    best_score = -np.inf  # sum_k cL^2/nL + sum_k cR^2/nR; larger is better
    best: tuple[int, float] | None = None
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=np.float64)
        valid = xs[:-1] < xs[1:]
        if min_samples_leaf > 1:
            valid &= (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        if not valid.any():
            continue
        right = total - left
        score = (left**2).sum(axis=1) / n_left + (right**2).sum(axis=1) / (n - n_left)
        score = np.where(valid, score, -np.inf)
        top = score.max()
        i = int(np.flatnonzero(score >= top - _TIE * max(1.0, abs(top)))[0])
        if score[i] > best_score + _TIE * max(1.0, abs(best_score) if np.isfinite(best_score) else 1.0):
            best_score = score[i]
            best = (f, 0.5 * (xs[i] + xs[i + 1]))
    if best is None:
        return None
    impurity = 1.0 - best_score / n
    if impurity >= parent - _TIE:
        return None
    return Split(best[0], float(best[1]), float(impurity))


@dataclass
class Tree:
    """Array-backed binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        c = self.counts[self.apply(X)]
        return c / c.sum(axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["counts"], dtype=np.float64))


def grow_tree(X, y, n_classes: int, max_depth: int, min_samples_leaf: int,
              features_per_split: int, rng: np.random.Generator) -> Tree:
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    n_feat = X.shape[1]
    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if depth >= max_depth or len(idx) < 2 * min_samples_leaf or np.count_nonzero(counts[node]) < 2:
            continue
        subset = rng.choice(n_feat, size=min(features_per_split, n_feat), replace=False)
        split = best_split(X[idx], y[idx], subset, n_classes, min_samples_leaf)
        if split is None:
            continue
        go_left = X[idx, split.feature] <= split.threshold
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = split.feature, split.threshold
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(counts, dtype=np.float64))


@dataclass
class ForestModel:
    trees: list[Tree]
    classes: np.ndarray
    n_features: int
    config: ForestConfig
    feature_config: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros((len(X), len(self.classes)))
        for t in self.trees:
            acc += t.predict_proba(X)
        return acc / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]

    def to_dict(self) -> dict:
        return {
            "format": FOREST_FORMAT,
            "config": asdict(self.config),
            "classes": self.classes.tolist(),
            "n_features": self.n_features,
            "feature_config": self.feature_config,
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        if d.get("format") != FOREST_FORMAT:
            raise ValueError(f"unsupported forest format {d.get('format')!r}")
        return cls([Tree.from_dict(t) for t in d["trees"]], np.asarray(d["classes"]),
                   int(d["n_features"]), ForestConfig(**d["config"]), d.get("feature_config", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def forest_train(features, labels, cfg: ForestConfig = ForestConfig(), feature_config: dict | None = None) -> ForestModel:
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise ValueError(f"shape mismatch: features {X.shape}, labels {labels.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    classes, y = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("forest training needs at least two classes")
    if len(X) < 2 * cfg.min_samples_leaf:
        raise ValueError("too few samples for min_samples_leaf")
    n, f = X.shape
    mtry = cfg.features_per_split or math.ceil(math.sqrt(f))
    trees = []
    # one child seed per tree: training tree t never depends on trees < t
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n) if cfg.bootstrap else np.arange(n)
        trees.append(grow_tree(X[idx], y[idx], len(classes), cfg.max_depth, cfg.min_samples_leaf, mtry, rng))
    return ForestModel(trees, classes, f, cfg, dict(feature_config or {}))


def forest_predict(model: ForestModel, x) -> tuple:
    """Label and class-probability vector for one feature vector; ties go to the lower class."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forest_predict takes a single feature vector")
    p = model.predict_proba(x[None])[0]
    return model.classes[int(np.argmax(p))], p


# ------------------------------------------------------------ pixel features

@dataclass(frozen=True)
class FeatureConfig:
    window_radius: int = 2
    fcm_memberships: bool = True
    region_features: bool = True
    coordinates: bool = True

    def names(self, c: int) -> list[str]:
        out = ["intensity", "local_mean", "local_std", "gradient"]
        if self.fcm_memberships:
            out += [f"membership_{i}" for i in range(c)]
        if self.coordinates:
            out += ["row", "col"]
        if self.region_features:
            out += ["area_fraction", "eccentricity"]
        return out


def component_eccentricity(labels: np.ndarray, n: int) -> np.ndarray:
    """Second-moment ellipse eccentricity per component (index 0 unused)."""
    rr, cc = np.indices(labels.shape)
    lab = labels.ravel()
    cnt = np.bincount(lab, minlength=n + 1).astype(np.float64)
    cnt[cnt == 0] = 1
    r = rr.ravel().astype(np.float64)
    c = cc.ravel().astype(np.float64)
    mr = np.bincount(lab, r, n + 1) / cnt
    mc = np.bincount(lab, c, n + 1) / cnt
    srr = np.bincount(lab, r * r, n + 1) / cnt - mr**2
    scc = np.bincount(lab, c * c, n + 1) / cnt - mc**2
    src = np.bincount(lab, r * c, n + 1) / cnt - mr * mc
    tr = srr + scc
    disc = np.sqrt(np.maximum(((srr - scc) / 2) ** 2 + src**2, 0))
    lmax = tr / 2 + disc
    lmin = np.maximum(tr / 2 - disc, 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ecc = np.where(lmax > 1e-12, np.sqrt(np.clip(1 - lmin / lmax, 0, 1)), 0.0)
    return ecc


def extract_pixel_features(s: Slice | np.ndarray, fcm_model: FcmModel | None,
                           cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """One feature row per pixel, row-major, shape ``(H*W, F)``.

    Columns: intensity, local mean and std over a (2r+1)^2 window, central
    difference gradient magnitude, FCM memberships, normalised (row, col),
    and the area fraction and eccentricity of the pixel's connected
    component in the hardened FCM label image. Windows clamp at borders.
    """
    img = s.data if isinstance(s, Slice) else np.asarray(s, dtype=np.float64)
    h, w = img.shape
    size = 2 * cfg.window_radius + 1
    mean = ndimage.uniform_filter(img, size=size, mode="nearest")
    sq = ndimage.uniform_filter(img * img, size=size, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    pad = np.pad(img, 1, mode="edge")
    gy = 0.5 * (pad[2:, 1:-1] - pad[:-2, 1:-1])
    gx = 0.5 * (pad[1:-1, 2:] - pad[1:-1, :-2])
    cols = [img, mean, std, np.hypot(gx, gy)]

    needs_fcm = cfg.fcm_memberships or cfg.region_features
    if needs_fcm:
        if fcm_model is None:
            raise ValueError("FCM features requested but no FCM model given")
        if fcm_model.centroids.shape[1] != 1:
            raise ValueError("pixel features expect a scalar-intensity FCM model")
        u = fcm_predict(fcm_model, img.ravel())
        if u.ndim == 1:
            u = u[:, None]
    if cfg.fcm_memberships:
        cols.extend(row.reshape(h, w) for row in u)
    if cfg.coordinates:
        rr, cc = np.indices((h, w), dtype=np.float64)
        cols.append(rr / max(h - 1, 1))
        cols.append(cc / max(w - 1, 1))
    if cfg.region_features:
        hard = defuzzify(u).reshape(h, w)
        area = np.zeros((h, w))
        ecc = np.zeros((h, w))
        for k in range(fcm_model.c):
            lab, n = ndimage.label(hard == k)
            if n == 0:
                continue
            sizes = np.bincount(lab.ravel(), minlength=n + 1).astype(np.float64)
            e = component_eccentricity(lab, n)
            sel = lab > 0
            area[sel] = sizes[lab[sel]] / (h * w)
            ecc[sel] = e[lab[sel]]
        cols.extend([area, ecc])
    return np.stack([c.ravel() for c in cols], axis=1)
