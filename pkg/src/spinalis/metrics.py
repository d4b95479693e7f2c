"""Overlap and accuracy metrics at pixel and image (per-slice) level."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .core import Label, MaskVolume


class _Undefined:
    """Marker for a metric whose denominator is zero."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


class Level(str, Enum):
    PIXEL = "pixel"
    IMAGE = "image"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    level: Level = Level.PIXEL

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if self.level != other.level:
            raise ValueError("cannot add counts of different levels")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.tn + other.tn, self.level)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level"] = self.level.value
        return d


def _binary(mask, label: int = Label.TUMOR) -> np.ndarray:
    """Tumor indicator; plain arrays with values beyond 1 are read as label grids."""
    if isinstance(mask, MaskVolume):
        return mask.data == label
    arr = np.asarray(mask)
    return arr.astype(bool) if arr.dtype == bool or arr.max(initial=0) <= 1 else arr == label


def _as_planes(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 2 else a


def confusion_counts(pred, truth, level: Level | str) -> ConfusionCounts:
    """Confusion counts for the tumor label.

    Pixel level compares voxels. Image level treats each 2-D plane as one
    image: a truth-positive plane is a TP when some predicted component
    overlaps the truth and a FN otherwise; each predicted component with no
    truth overlap adds one FP; planes empty in both masks are TNs.
    """
    level = Level(level)
    if isinstance(pred, MaskVolume) and isinstance(truth, MaskVolume) and not pred.same_geometry(truth):
        raise ValueError("geometry mismatch between prediction and truth")
    p = _binary(pred)
    t = _binary(truth)
    if p.shape != t.shape:
        raise ValueError(f"geometry mismatch: {p.shape} vs {t.shape}")
    if level is Level.PIXEL:
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        tn = int(p.size - tp - fp - fn)
        return ConfusionCounts(tp, fp, fn, tn, level)

    tp = fp = fn = tn = 0
    for pp, tt in zip(_as_planes(p), _as_planes(t)):
        lab, n = ndimage.label(pp)
        overlapping = set(np.unique(lab[tt & pp]).tolist()) - {0}
        fp += n - len(overlapping)
        if tt.any():
            if overlapping:
                tp += 1
            else:
                fn += 1
        elif n == 0:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn, level)


def iou(c: ConfusionCounts):
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return UNDEFINED
    return c.tp / denom


def class_accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("class accuracy undefined for an empty population")
    return (c.tn + c.tp) / c.total


def dice(x, y):
    """2|X ∩ Y| / (|X| + |Y|) for boolean masks or Python sets."""
    if isinstance(x, (set, frozenset)) or isinstance(y, (set, frozenset)):
        x, y = set(x), set(y)
        inter, sx, sy = len(x & y), len(x), len(y)
    else:
        a, b = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
        if a.shape != b.shape:
            raise ValueError("mask shapes differ")
        inter, sx, sy = int(np.count_nonzero(a & b)), int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if sx + sy == 0:
        return UNDEFINED
    return 2.0 * inter / (sx + sy)


def dice_from_counts(c: ConfusionCounts):
    denom = 2 * c.tp + c.fp + c.fn
    return UNDEFINED if denom == 0 else 2 * c.tp / denom


def mean_iou(batch) -> tuple[float, int]:
    """Mean per-sample pixel IoU over ``(pred, truth)`` pairs.

    Items may also be precomputed IoU values (a float or ``UNDEFINED``).
    Returns ``(mean, skipped)`` where ``skipped`` counts samples whose IoU is
    undefined (both masks empty).
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    values = []
    skipped = 0
    for item in batch:
        val = iou(confusion_counts(item[0], item[1], Level.PIXEL)) if isinstance(item, tuple) else item
        if val is UNDEFINED:
            skipped += 1
        else:
            values.append(float(val))
    if not values:
        raise ValueError("IoU undefined for every sample in the batch")
    return float(np.sum(values) / len(values)), skipped


def macro_class_accuracy(pred_labels, true_labels, n_classes: int) -> tuple[float, list[float]]:
    """One-vs-rest class accuracy per class and its macro average."""
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    per = []
    for k in range(n_classes):
        c = ConfusionCounts(
            int(np.sum((p == k) & (t == k))), int(np.sum((p == k) & (t != k))),
            int(np.sum((p != k) & (t == k))), int(np.sum((p != k) & (t != k))), Level.IMAGE)
        per.append(class_accuracy(c))
    return float(np.mean(per)), per


def _num(x):
    return None if x is UNDEFINED else x


def metric_report(pairs: dict) -> dict:
    """JSON-ready report for ``{volume_id: (pred, truth)}``.

    Per-volume blocks hold pixel and image counts, IoU, Dice and class
    accuracy; the aggregate block pools the counts and adds mean IoU/Dice
    with the number of skipped (undefined) samples.
    """
    volumes = {}
    pooled_px = ConfusionCounts(0, 0, 0, 0, Level.PIXEL)
    pooled_im = ConfusionCounts(0, 0, 0, 0, Level.IMAGE)
    dices = []
    for vid in sorted(pairs):
        pred, truth = pairs[vid]
        px = confusion_counts(pred, truth, Level.PIXEL)
        im = confusion_counts(pred, truth, Level.IMAGE)
        pooled_px, pooled_im = pooled_px + px, pooled_im + im
        d = dice_from_counts(px)
        dices.append(d)
        volumes[str(vid)] = {
            "pixel": {**px.to_dict(), "iou": _num(iou(px)), "dice": _num(d),
                      "class_accuracy": class_accuracy(px)},
            "image": {**im.to_dict(), "iou": _num(iou(im)), "class_accuracy": class_accuracy(im)},
        }
    defined = [d for d in dices if d is not UNDEFINED]
    try:
        miou, skipped = mean_iou([(pairs[k][0], pairs[k][1]) for k in sorted(pairs)])
    except ValueError:
        miou, skipped = None, len(pairs)
    aggregate = {
        "pixel": {**pooled_px.to_dict(), "iou": _num(iou(pooled_px)), "dice": _num(dice_from_counts(pooled_px)),
                  "class_accuracy": class_accuracy(pooled_px) if pooled_px.total else None},
        "image": {**pooled_im.to_dict(), "iou": _num(iou(pooled_im)),
                  "class_accuracy": class_accuracy(pooled_im) if pooled_im.total else None},
        "mean_iou": miou,
        "mean_dice": float(np.mean(defined)) if defined else None,
        "skipped": skipped,
        "n_volumes": len(pairs),
    }
    return {"volumes": volumes, "aggregate": aggregate}
