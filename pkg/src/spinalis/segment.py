"""Two-stage tumor segmentation: FCM slice relevance, then Random Forest pixels."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Label, MaskVolume, Slice, Volume, check_geometry, save_volume
from .fcm import FcmConfig, FcmModel, defuzzify, fcm_fit, sort_clusters
from .forest import FeatureConfig, ForestConfig, ForestModel, extract_pixel_features, forest_train
from .preprocess import DenoiseConfig, denoise


@dataclass(frozen=True)
class RelevanceConfig:
    intensity_z_threshold: float = 1.5
    cluster_z_threshold: float = 4.0
    min_component_px: int = 20
    compactness_max: float = 40.0
    csf_proximity_px: int = 10
    manual_override: tuple[int, ...] | None = None

    def __post_init__(self):
        if min(self.intensity_z_threshold, self.cluster_z_threshold, self.compactness_max) <= 0:
            raise ValueError("relevance thresholds must be positive")
        if self.min_component_px < 1 or self.csf_proximity_px < 1:
            raise ValueError("relevance pixel thresholds must be positive")
        if self.manual_override is not None:
            object.__setattr__(self, "manual_override", tuple(int(z) for z in self.manual_override))


@dataclass(frozen=True)
class SegmenterConfig:
    denoise: DenoiseConfig | None = DenoiseConfig()
    fcm: FcmConfig = FcmConfig()
    features: FeatureConfig = FeatureConfig()
    forest: ForestConfig = ForestConfig()
    relevance: RelevanceConfig = RelevanceConfig()
    probability_threshold: float = 0.5
    min_component_px: int = 20
    use_relevance: bool = True
    max_tumor_samples_per_volume: int | None = None
    threads: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.relevance.manual_override is not None:
            d["relevance"]["manual_override"] = list(self.relevance.manual_override)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SegmenterConfig":
        d = dict(d)
        den = d.get("denoise", asdict(DenoiseConfig()))
        return cls(
            denoise=None if den is None else DenoiseConfig(**den),
            fcm=FcmConfig(**d.get("fcm", {})),
            features=FeatureConfig(**d.get("features", {})),
            forest=ForestConfig(**d.get("forest", {})),
            relevance=RelevanceConfig(**d.get("relevance", {})),
            **{k: v for k, v in d.items() if k not in ("denoise", "fcm", "features", "forest", "relevance")},
        )


@dataclass
class SlicePrep:
    """Denoised plane, its fitted FCM model and hardened cluster labels."""

    z: int
    image: np.ndarray
    fcm: FcmModel
    hard: np.ndarray


@dataclass
class SegmentationResult:
    mask: MaskVolume
    relevant: list[bool]
    probability: Volume
    relevance_details: dict = field(default_factory=dict)

    def save(self, out_dir, stem: str = "segmentation") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_volume(self.mask, out / f"{stem}_mask.svol")
        save_volume(self.probability, out / f"{stem}_prob.svol")
        report = {
            "relevant_slices": [z for z, r in enumerate(self.relevant) if r],
            "relevant": self.relevant,
            "tumor_voxels": int(np.count_nonzero(self.mask.data == Label.TUMOR)),
            "details": self.relevance_details,
        }
        (out / f"{stem}_relevance.json").write_text(json.dumps(report, indent=2, sort_keys=True))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def prepare_slices(v: Volume, cfg: SegmenterConfig) -> list[SlicePrep]:
    """Denoise and cluster every sagittal plane."""

    def work(z):
        img = v.data[z].astype(np.float64)
        if cfg.denoise is not None:
            img = denoise(Slice(img), cfg.denoise).data
        model = sort_clusters(fcm_fit(img.ravel(), replace(cfg.fcm, seed=cfg.fcm.seed + z)))
        hard = defuzzify(model.memberships).reshape(img.shape)
        model.memberships = None
        return SlicePrep(z, img, model, hard)

    return _map(work, range(v.depth), cfg.threads)


def _perimeter(comp: np.ndarray) -> int:
    """Count of 4-neighbour edges between the component and its outside."""
    p = np.pad(comp, 1)
    return int(np.sum(p[1:, :] != p[:-1, :]) + np.sum(p[:, 1:] != p[:, :-1]))


def select_relevant_slices(v: Volume, preps: list[SlicePrep], cfg: RelevanceConfig = RelevanceConfig(),
                           details: dict | None = None) -> set[int]:
    """Flag planes containing a tumor-like bright region.

    Within each plane the brightest hardened cluster is the CSF-like
    tissue. Its pixels that sit more than ``cluster_z_threshold`` robust
    deviations above that cluster's median form candidate components. A
    plane is relevant when a candidate has at least ``min_component_px``
    pixels, a mean intensity of at least volume mean + ``intensity_z_threshold``
    volume standard deviations, and is either irregular
    (perimeter^2/area >= ``compactness_max``) or within ``csf_proximity_px``
    of the remaining bright-cluster (CSF) pixels.
    """
    if cfg.manual_override is not None:
        return {z for z in cfg.manual_override if 0 <= z < v.depth}
    images = np.stack([p.image for p in preps])
    g_mean, g_std = float(images.mean()), float(images.std())
    floor = g_mean + cfg.intensity_z_threshold * g_std
    selected = set()
    for p in preps:
        bright = p.hard == p.fcm.c - 1
        if bright.sum() < cfg.min_component_px or p.fcm.centroids[-1, 0] < floor:
            continue
        vals = p.image[bright]
        med = float(np.median(vals))
        mad = 1.4826 * float(np.median(np.abs(vals - med)))
        cand = bright & (p.image >= med + cfg.cluster_z_threshold * max(mad, 1e-6))
        lab, n = ndimage.label(cand)
        if n == 0:
            continue
        csf = bright & ~cand
        near_csf = ndimage.binary_dilation(csf, iterations=cfg.csf_proximity_px) if csf.any() else csf
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        means = np.bincount(lab.ravel(), p.image.ravel(), minlength=n + 1) / np.maximum(sizes, 1)
        for k in np.flatnonzero(sizes[1:] >= cfg.min_component_px) + 1:
            if means[k] < floor:
                continue
            comp = lab == k
            compact = _perimeter(comp) ** 2 / sizes[k]
            if compact >= cfg.compactness_max or np.any(near_csf & comp):
                selected.add(p.z)
                if details is not None:
                    details[str(p.z)] = {"size": int(sizes[k]), "mean": float(means[k]),
                                         "compactness": float(compact)}
                break
    return selected


def _features(prep: SlicePrep, cfg: SegmenterConfig) -> np.ndarray:
    return extract_pixel_features(prep.image, prep.fcm, cfg.features)


def relevant_set(v: Volume, preps: list[SlicePrep], cfg: SegmenterConfig, details=None) -> set[int]:
    if not cfg.use_relevance:
        return set(range(v.depth))
    return select_relevant_slices(v, preps, cfg.relevance, details)


def train_segmenter(corpus, cfg: SegmenterConfig = SegmenterConfig()) -> ForestModel:
    """Train the pixel forest on ``[(volume, tumor_mask), ...]``.

    Per volume, every tumor pixel of the relevant planes is kept together
    with an equal-size seeded sample of non-tumor pixels from those planes.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(cfg.seed)
    xs, ys = [], []
    for vol, truth in corpus:
        check_geometry(vol, truth)
        tumor = truth.data == Label.TUMOR
        if not tumor.any():
            continue
        preps = prepare_slices(vol, cfg)
        rel = sorted(relevant_set(vol, preps, cfg))
        if not rel:
            continue
        feats = np.concatenate([_features(preps[z], cfg) for z in rel])
        lab = np.concatenate([tumor[z].ravel() for z in rel])
        pos = np.flatnonzero(lab)
        neg = np.flatnonzero(~lab)
        if len(pos) == 0:
            continue
        if cfg.max_tumor_samples_per_volume and len(pos) > cfg.max_tumor_samples_per_volume:
            pos = np.sort(rng.choice(pos, cfg.max_tumor_samples_per_volume, replace=False))
        neg = np.sort(rng.choice(neg, min(len(pos), len(neg)), replace=False))
        idx = np.concatenate([pos, neg])
        xs.append(feats[idx])
        ys.append(lab[idx].astype(np.int64))
    if not xs:
        raise ValueError("training corpus contains no tumor voxels on relevant slices")
    fc = cfg.to_dict()
    fc["feature_names"] = cfg.features.names(cfg.fcm.c)
    return forest_train(np.concatenate(xs), np.concatenate(ys), cfg.forest, fc)


def _model_config(model: ForestModel, cfg: SegmenterConfig | None) -> SegmenterConfig:
    if cfg is None:
        if not model.feature_config:
            raise ValueError("model carries no segmenter configuration")
        stored = {k: v for k, v in model.feature_config.items() if k != "feature_names"}
        return SegmenterConfig.from_dict(stored)
    names = model.feature_config.get("feature_names")
    if names is not None and names != cfg.features.names(cfg.fcm.c):
        raise ValueError("feature configuration does not match the trained model")
    return cfg


def segment_volume(v: Volume, model: ForestModel, cfg: SegmenterConfig | None = None) -> SegmentationResult:
    """Predict a tumor mask; planes not flagged relevant stay background."""
    cfg = _model_config(model, cfg)
    expected = len(cfg.features.names(cfg.fcm.c))
    if model.n_features != expected:
        raise ValueError(f"model expects {model.n_features} features, configuration yields {expected}")
    preps = prepare_slices(v, cfg)
    details: dict = {}
    rel = relevant_set(v, preps, cfg, details)
    prob = np.zeros(v.shape, dtype=np.float64)
    tumor_col = int(np.flatnonzero(model.classes == 1)[0]) if np.any(model.classes == 1) else None

    def work(z):
        if tumor_col is None:
            return z, np.zeros(v.shape[1:])
        p = model.predict_proba(_features(preps[z], cfg))[:, tumor_col]
        return z, p.reshape(v.shape[1:])

    for z, p in _map(work, sorted(rel), cfg.threads):
        prob[z] = p
    prob32 = prob.astype(np.float32)
    mask = prob32 >= cfg.probability_threshold
    for z in range(v.depth):
        if not mask[z].any():
            continue
        lab, n = ndimage.label(mask[z])
        sizes = np.bincount(lab.ravel(), minlength=n + 1)
        small = sizes < cfg.min_component_px
        small[0] = False
        mask[z][small[lab]] = False
    labels = np.where(mask, Label.TUMOR, Label.BACKGROUND).astype(np.uint8)
    return SegmentationResult(
        MaskVolume(labels, v.spacing),
        [z in rel for z in range(v.depth)],
        Volume(prob32, v.spacing),
        details,
    )
