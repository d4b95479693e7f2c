"""Independent reference implementations used by the tests."""

import itertools

import numpy as np


def set_counts(pred, truth):
    """TP/FP/FN/TN by enumerating coordinates as Python sets."""
    shape = np.shape(pred)
    allpix = set(itertools.product(*(range(n) for n in shape)))
    p = {ix for ix in allpix if pred[ix]}
    t = {ix for ix in allpix if truth[ix]}
    return len(p & t), len(p - t), len(t - p), len(allpix - p - t)


def gini_list(labels, n_classes):
    n = len(labels)
    if n == 0:
        return 0.0
    return 1.0 - sum((sum(1 for v in labels if v == k) / n) ** 2 for k in range(n_classes))


def brute_force_split(X, y, n_classes, min_samples_leaf=1):
    """Every (feature, midpoint) pair, scored directly; ties keep the first seen."""
    n, f = X.shape
    parent = gini_list(list(y), n_classes)
    best = None
    for j in range(f):
        vals = sorted(set(X[:, j].tolist()))
        for a, b in zip(vals, vals[1:]):
            thr = 0.5 * (a + b)
            left = [y[i] for i in range(n) if X[i, j] <= thr]
            right = [y[i] for i in range(n) if X[i, j] > thr]
            if len(left) < min_samples_leaf or len(right) < min_samples_leaf:
                continue
            imp = (len(left) * gini_list(left, n_classes) + len(right) * gini_list(right, n_classes)) / n
            if best is None or imp < best[2] - 1e-12:
                best = (j, thr, imp)
    if best is None or best[2] >= parent - 1e-12:
        return None
    return best


def naive_conv2d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation; x (N, C, H, W), w (F, C, k, k)."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h - k + 2 * pad) // stride + 1
    wo = (wd - k + 2 * pad) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[i, o, r, s] = np.sum(patch * w[o]) + b[o]
    return out
