"""Corpus generation, source-level splitting and the end-to-end experiments."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cnn import INPUT_SIZE, CnnModel, TrainConfig, cnn_predict_proba, cnn_train, init_model, resample_roi
from .core import Label, MaskVolume, Volume, load_volume, save_volume
from .forest import ForestConfig
from .localize import fuse_tumor_with_labels, label_vertebrae
from .metrics import ConfusionCounts, Level, class_accuracy, confusion_counts, dice
from .phantom import (PhantomConfig, TumorFitError, TumorSpec, TumorType, generate_phantom, inject_tumor,
                      random_tumor_spec, write_sidecar)
from .segment import SegmenterConfig, segment_volume, train_segmenter


@dataclass
class CorpusItem:
    source_id: str
    volume: Volume
    anatomy: MaskVolume  # phantom labels, tumor included as 100
    truth: MaskVolume  # {0, 100}
    spec: TumorSpec | None
    config: PhantomConfig

    @property
    def has_tumor(self) -> bool:
        return self.spec is not None


def make_item(source_id: str, cfg: PhantomConfig, spec: TumorSpec | None) -> CorpusItem:
    ph = generate_phantom(cfg)
    if spec is None:
        truth = MaskVolume(np.zeros(ph.mask.shape, dtype=np.uint8), ph.mask.spacing)
        return CorpusItem(source_id, ph.volume, ph.mask, truth, None, cfg)
    vol, mask, truth = inject_tumor(ph, spec)
    return CorpusItem(source_id, vol, mask, truth, spec, cfg)


def generate_corpus(count: int, seed: int, phantom: PhantomConfig = PhantomConfig(), control_every: int = 0,
                    tumor_type=None) -> list[CorpusItem]:
    """Seeded phantoms; every ``control_every``-th item (when > 0) is tumor-free.

    Tumor types cycle IM, IDEM, ED unless ``tumor_type`` fixes one.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    ss = np.random.SeedSequence(seed)
    items = []
    for i, child in enumerate(ss.spawn(count)):
        rng = np.random.default_rng(child)
        cfg = replace(phantom, seed=int(rng.integers(0, 2**31)))
        sid = f"ph{seed}_{i:04d}"
        if control_every and i % control_every == control_every - 1:
            items.append(make_item(sid, cfg, None))
            continue
        kind = TumorType(i % 3) if tumor_type is None else TumorType.parse(tumor_type)
        for _ in range(20):
            spec = random_tumor_spec(rng, cfg, kind)
            try:
                items.append(make_item(sid, cfg, spec))
                break
            except TumorFitError:
                continue
        else:
            raise TumorFitError(f"could not place a {kind.display} tumor in {sid}")
    return items


CORPUS_MANIFEST = "corpus.json"


def save_corpus(items: list[CorpusItem], out_dir) -> Path:
    """Write each item as volume, anatomy mask and truth SVOLs plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for it in items:
        sid = it.source_id
        save_volume(it.volume, out / f"{sid}.svol")
        save_volume(it.anatomy, out / f"{sid}_mask.svol")
        save_volume(it.truth, out / f"{sid}_truth.svol")
        write_sidecar(out / f"{sid}.json", it.config, it.spec, it.truth)
        entries.append({
            "source_id": sid,
            "volume": f"{sid}.svol",
            "mask": f"{sid}_mask.svol",
            "truth": f"{sid}_truth.svol",
            "sidecar": f"{sid}.json",
            "tumor": it.spec.to_dict() if it.spec else None,
        })
    path = out / CORPUS_MANIFEST
    path.write_text(json.dumps({"items": entries}, indent=2, sort_keys=True))
    return path


def load_corpus(corpus_dir) -> list[CorpusItem]:
    root = Path(corpus_dir)
    manifest = root / CORPUS_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {CORPUS_MANIFEST} in {root}")
    items = []
    for e in json.loads(manifest.read_text())["items"]:
        sidecar = json.loads((root / e["sidecar"]).read_text())
        spec = None
        if e.get("tumor"):
            t = dict(e["tumor"])
            t["axis_ratios"] = tuple(t["axis_ratios"])
            spec = TumorSpec(**t)
        items.append(CorpusItem(e["source_id"], load_volume(root / e["volume"]), load_volume(root / e["mask"]),
                                load_volume(root / e["truth"]), spec, PhantomConfig(**sidecar["config"])))
    return items


def split_corpus(manifest, ratio: float = 0.8, seed: int = 0) -> tuple[list[str], list[str]]:
    """Split by source volume: every record sharing a source lands on one side.

    ``manifest`` is a sequence of source-id strings or of records carrying a
    ``source_id`` key. Returns sorted ``(train_ids, test_ids)``.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    ids = sorted({m if isinstance(m, str) else m["source_id"] for m in manifest})
    if not ids:
        raise ValueError("empty manifest")
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    train = sorted(ids[i] for i in perm[:n_train])
    test = sorted(ids[i] for i in perm[n_train:])
    return train, test


def tumor_crop(volume: Volume, truth: MaskVolume, size_mm: float = 24.0) -> np.ndarray:
    """Square in-plane crop centred on the tumor in its largest cross-section."""
    t = truth.data == Label.TUMOR
    if not t.any():
        raise ValueError("no tumor to crop")
    z = int(np.argmax(t.sum(axis=(1, 2))))
    rows, cols = np.nonzero(t[z])
    cy, cx = int(round(rows.mean())), int(round(cols.mean()))
    sx, sy, _ = volume.spacing
    hy, hx = int(round(size_mm / (2 * sy))), int(round(size_mm / (2 * sx)))
    plane = np.pad(np.asarray(volume.data[z], dtype=np.float64), ((hy, hy), (hx, hx)))
    return plane[cy:cy + 2 * hy, cx:cx + 2 * hx]


# coarser in-plane grid than the default: crops are resampled anyway
CROP_PHANTOM = PhantomConfig(width=96, height=128, depth=16)


def classification_dataset(count: int, seed: int, phantom: PhantomConfig = CROP_PHANTOM,
                           size: int = INPUT_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Balanced tumor crops resampled to ``size``; labels are tumor-type ids."""
    items = generate_corpus(count, seed, phantom)
    x = np.stack([resample_roi(tumor_crop(it.volume, it.truth), size) for it in items]).astype(np.float32)
    y = np.array([int(it.spec.tumor_type) for it in items], dtype=np.int64)
    return x, y


# ------------------------------------------------------------ experiments

@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomConfig = PhantomConfig()
    segmenter: SegmenterConfig | None = None
    train: TrainConfig = TrainConfig(epochs=15)
    split_ratio: float = 0.8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.segmenter is None:
            object.__setattr__(self, "segmenter", default_segmenter_config(self.seed, self.threads))

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None, threads: int | None = None) -> "PipelineConfig":
        unknown = set(d) - {"phantom", "segmenter", "train", "split_ratio", "seed", "threads"}
        if unknown:
            raise ValueError(f"unknown configuration sections: {sorted(unknown)}")
        seed = d.get("seed", 0) if seed is None else seed
        threads = d.get("threads", 1) if threads is None else threads
        seg = d.get("segmenter")
        seg = (SegmenterConfig.from_dict({**asdict(default_segmenter_config(seed, threads)), **seg})
               if seg is not None else None)
        if seg is not None:
            seg = replace(seg, threads=threads)
        return cls(
            phantom=PhantomConfig(**d.get("phantom", {})),
            segmenter=seg,
            train=TrainConfig(**{"epochs": 15, **d.get("train", {})}),
            split_ratio=d.get("split_ratio", 0.8),
            seed=seed,
            threads=threads,
        )

    def to_dict(self) -> dict:
        return {"phantom": asdict(self.phantom), "segmenter": self.segmenter.to_dict(), "train": asdict(self.train),
                "split_ratio": self.split_ratio, "seed": self.seed, "threads": self.threads}


def default_segmenter_config(seed: int = 0, threads: int = 1) -> SegmenterConfig:
    return SegmenterConfig(forest=ForestConfig(n_trees=20, max_depth=12, min_samples_leaf=5, seed=seed),
                           threads=threads, seed=seed)


def without_fcm_features(cfg: SegmenterConfig) -> SegmenterConfig:
    """The ablated segmenter: no membership or cluster-region pixel features."""
    return replace(cfg, features=replace(cfg.features, fcm_memberships=False, region_features=False))


def _evaluate_segmenter(model, cfg: SegmenterConfig, test: list[CorpusItem]) -> dict:
    dices, total = [], ConfusionCounts(0, 0, 0, 0, Level.PIXEL)
    controls = empty_controls = 0
    per_volume = []
    for it in test:
        res = segment_volume(it.volume, model, cfg)
        if it.has_tumor:
            d = float(dice(res.mask.data == Label.TUMOR, it.truth.data == Label.TUMOR))
            dices.append(d)
            total = total + confusion_counts(res.mask.data, it.truth.data, Level.PIXEL)
            per_volume.append({"source_id": it.source_id, "dice": d, "type": it.spec.tumor_type.display})
        else:
            controls += 1
            empty = not np.any(res.mask.data == Label.TUMOR)
            empty_controls += empty
            per_volume.append({"source_id": it.source_id, "control_empty": bool(empty)})
    return {
        "mean_dice": float(np.mean(dices)) if dices else float("nan"),
        "pixel_class_accuracy": class_accuracy(total) if total.total else float("nan"),
        "control_volumes": controls,
        "control_empty_fraction": empty_controls / controls if controls else float("nan"),
        "per_volume": per_volume,
    }


def _split_items(corpus: list[CorpusItem], ratio: float, seed: int):
    train_ids, test_ids = split_corpus([it.source_id for it in corpus], ratio, seed)
    train_set, test_set = set(train_ids), set(test_ids)
    return [it for it in corpus if it.source_id in train_set], [it for it in corpus if it.source_id in test_set]


def run_benchmark(corpus: list[CorpusItem], cfg: SegmenterConfig, ratio: float = 0.8, seed: int = 0,
                  controls: list[CorpusItem] | None = None) -> dict:
    """Train on the training split, report Dice and pixel accuracy on the test split."""
    t0 = time.perf_counter()
    train, test = _split_items(corpus, ratio, seed)
    model = train_segmenter([(it.volume, it.truth) for it in train if it.has_tumor], cfg)
    report = _evaluate_segmenter(model, cfg, test + list(controls or []))
    report.update(n_train=len(train), n_test=len(test), seconds=time.perf_counter() - t0)
    return report


def run_ablation(corpus: list[CorpusItem], cfg: SegmenterConfig, ratio: float = 0.8, seed: int = 0) -> dict:
    full = run_benchmark(corpus, cfg, ratio, seed)
    ablated = run_benchmark(corpus, without_fcm_features(cfg), ratio, seed)
    return {
        "dice_fcm_rf": full["mean_dice"],
        "dice_rf_only": ablated["mean_dice"],
        "pixel_accuracy_fcm_rf": full["pixel_class_accuracy"],
        "pixel_accuracy_rf_only": ablated["pixel_class_accuracy"],
        "fcm_helps": full["mean_dice"] > ablated["mean_dice"],
    }


def run_classification(train: tuple, test: tuple, train_cfg: TrainConfig = TrainConfig(epochs=15),
                       seed: int = 0) -> tuple[CnnModel, dict]:
    model = init_model(seed=seed)
    model, hist = cnn_train(model, train, train_cfg)
    pred = np.argmax(cnn_predict_proba(model, test[0]), axis=1)
    return model, {
        "test_accuracy": float(np.mean(pred == np.asarray(test[1]))),
        "initial_train_loss": hist.initial_train_loss,
        "final_train_loss": hist.train_loss[-1],
        "train_loss": hist.train_loss,
        "epochs": train_cfg.epochs,
    }


def run_localization(corpus: list[CorpusItem], adjacency_mm: float = 5.0) -> dict:
    """Localize each phantom's ground-truth tumor against its generic vertebra mask."""
    origin_ok = impacted_ok = 0
    rows = []
    for it in corpus:
        if not it.has_tumor:
            continue
        generic = np.where(np.isin(it.anatomy.data, list(range(Label.T11, Label.L5 + 1))),
                           Label.VERTEBRA, 0).astype(np.uint8)
        labeling = label_vertebrae(MaskVolume(generic, it.anatomy.spacing))
        rep = fuse_tumor_with_labels(it.truth, labeling, adjacency_mm)
        origin_ok += rep.origin == it.spec.level
        impacted_ok += it.spec.level in rep.impacted
        rows.append({"source_id": it.source_id, "level": int(it.spec.level), **rep.to_dict()})
    n = len(rows)
    return {"n": n, "origin_accuracy": origin_ok / n if n else float("nan"),
            "impacted_recall": impacted_ok / n if n else float("nan"), "cases": rows}

