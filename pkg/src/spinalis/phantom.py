"""Seeded synthetic sagittal lumbar-spine phantoms with injectable tumors.

Anatomy is laid out in millimetres inside a fixed field of view, so the
voxel spacing follows from the requested grid size. The spinal canal is a
tube along y whose centre line bows antero-posteriorly; the cord ends at
the bottom of L1 (conus), below which the canal is filled with CSF.
Each vertebra is a superellipsoid body anterior to the canal plus a
neural-arch ring around it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import VERTEBRA_CODES, VERTEBRA_NAMES, Label, MaskVolume, Volume, vertebra_code

FOV_MM = (64.0, 256.0 / 3.0, 24.0)  # x (AP), y (cranio-caudal), z (lateral)
CORD_RADIUS = 4.0
CSF_RADIUS = 6.5
DURA_RADIUS = 7.2
EPIDURAL_GAP = 1.0
ARCH_THICKNESS = 2.0
BODY_DEPTH = 12.0
BODY_HALF_WIDTH = 9.0
CANAL_X0 = 30.0
MARGIN_Y = 4.0


class TumorType(IntEnum):
    INTRAMEDULLARY = 0
    INTRADURAL_EXTRAMEDULLARY = 1
    EXTRADURAL = 2

    @property
    def display(self) -> str:
        return {0: "Intramedullary", 1: "IntraduralExtramedullary", 2: "ExtraDural"}[int(self)]

    @classmethod
    def parse(cls, v) -> "TumorType":
        if isinstance(v, cls):
            return v
        if isinstance(v, str):
            key = v.replace("-", "").replace("_", "").replace(" ", "").lower()
            for t in cls:
                if key in (t.name.replace("_", "").lower(), t.display.lower()):
                    return t
            raise ValueError(f"unknown tumor type {v!r}")
        return cls(int(v))


class TumorFitError(ValueError):
    """The requested tumor does not fit its anatomical compartment."""


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 192
    height: int = 256
    depth: int = 24
    curvature_mm: float = 2.0
    vertebra_count: int = 7
    background: float = 0.05
    vertebra: float = 0.35
    csf: float = 0.85
    cord: float = 0.55
    dura: float = 0.45
    sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.width < 64 or self.height < 128 or self.depth < 8:
            raise ValueError("phantom grid too small to fit the anatomy (minimum 64x128x8)")
        if not 4 <= self.vertebra_count <= 7:
            raise ValueError("vertebra_count must be between 4 and 7")
        for name in ("background", "vertebra", "csf", "cord", "dura"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} intensity must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (FOV_MM[0] / self.width, FOV_MM[1] / self.height, FOV_MM[2] / self.depth)


@dataclass(frozen=True)
class TumorSpec:
    tumor_type: TumorType = TumorType.INTRAMEDULLARY
    level: int = Label.L1
    radius_mm: float = 3.0
    intensity: float = 0.95
    axis_ratios: tuple[float, float, float] = (1.0, 1.3, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tumor_type", TumorType.parse(self.tumor_type))
        object.__setattr__(self, "level", vertebra_code(self.level))
        if not self.radius_mm > 0:
            raise ValueError("radius_mm must be positive")
        if not 0 <= self.intensity <= 1:
            raise ValueError("intensity must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tumor_type"] = self.tumor_type.display
        d["level"] = VERTEBRA_NAMES[self.level]
        d["axis_ratios"] = list(self.axis_ratios)
        return d


@dataclass
class Phantom:
    volume: Volume
    mask: MaskVolume
    config: PhantomConfig
    levels: dict = field(default_factory=dict)  # code -> (y_top_mm, y_bottom_mm)


def _grids(cfg: PhantomConfig):
    sx, sy, sz = cfg.spacing
    z = (np.arange(cfg.depth) + 0.5) * sz
    y = (np.arange(cfg.height) + 0.5) * sy
    x = (np.arange(cfg.width) + 0.5) * sx
    return np.meshgrid(z, y, x, indexing="ij")


def canal_center(cfg: PhantomConfig, y_mm):
    return CANAL_X0 - cfg.curvature_mm * np.sin(np.pi * np.asarray(y_mm) / FOV_MM[1])


def level_bounds(cfg: PhantomConfig) -> dict[int, tuple[float, float]]:
    """Cranio-caudal extent (mm) of each vertebral level, body plus disc."""
    codes = VERTEBRA_CODES[len(VERTEBRA_CODES) - cfg.vertebra_count:]
    span = (FOV_MM[1] - 2 * MARGIN_Y) / len(codes)
    return {c: (MARGIN_Y + i * span, MARGIN_Y + (i + 1) * span) for i, c in enumerate(codes)}


def conus_y(cfg: PhantomConfig) -> float:
    bounds = level_bounds(cfg)
    return bounds[Label.L1][1] if Label.L1 in bounds else FOV_MM[1]


def generate_phantom(cfg: PhantomConfig = PhantomConfig()) -> Phantom:
    """Build an intensity volume and its label mask, deterministic per seed."""
    Z, Y, X = _grids(cfg)
    zc = FOV_MM[2] / 2
    xc = canal_center(cfg, Y)
    r = np.hypot(X - xc, Z - zc)
    labels = np.zeros(X.shape, dtype=np.uint8)

    cone = conus_y(cfg)
    # hemispherical cord tip at the conus
    cord = (r < CORD_RADIUS) & (Y < cone - CORD_RADIUS)
    cord |= (np.hypot(r, np.maximum(Y - (cone - CORD_RADIUS), 0)) < CORD_RADIUS)
    labels[r < DURA_RADIUS] = Label.DURA
    labels[r < CSF_RADIUS] = Label.CSF
    labels[cord] = Label.CORD

    bounds = level_bounds(cfg)
    for code, (top, bot) in bounds.items():
        span = bot - top
        ymid = top + 0.45 * span
        body_half_h = 0.39 * span
        post = xc - (DURA_RADIUS + EPIDURAL_GAP)
        xmid = post - BODY_DEPTH / 2
        body = ((np.abs((X - xmid) / (BODY_DEPTH / 2)) ** 4
                 + np.abs((Y - ymid) / body_half_h) ** 4
                 + np.abs((Z - zc) / BODY_HALF_WIDTH) ** 4) <= 1.0)
        inner = DURA_RADIUS + EPIDURAL_GAP
        arch = (r >= inner) & (r <= inner + ARCH_THICKNESS) & (np.abs(Y - ymid) <= 0.2 * span)
        labels[(body | arch) & (labels == 0)] = code

    means = {
        Label.BACKGROUND: cfg.background, Label.CSF: cfg.csf, Label.CORD: cfg.cord, Label.DURA: cfg.dura,
    }
    intensity = np.full(labels.shape, cfg.vertebra, dtype=np.float64)
    for lab, mu in means.items():
        intensity[labels == lab] = mu
    rng = np.random.default_rng(cfg.seed)
    intensity += rng.normal(0.0, cfg.sigma, size=intensity.shape) if cfg.sigma > 0 else 0.0
    intensity = np.clip(intensity, 0.0, 1.0)
    return Phantom(Volume(intensity, cfg.spacing), MaskVolume(labels, cfg.spacing), cfg, bounds)


def tumor_center(phantom: Phantom, spec: TumorSpec) -> tuple[float, float, float]:
    """Tumor centre (x, y, z) in mm for the requested type and level."""
    cfg = phantom.config
    if spec.level not in phantom.levels:
        raise TumorFitError(f"level {VERTEBRA_NAMES[spec.level]} is not present in this phantom")
    top, bot = phantom.levels[spec.level]
    y = top + 0.45 * (bot - top)
    z = FOV_MM[2] / 2
    xc = float(canal_center(cfg, y))
    rx = spec.radius_mm * spec.axis_ratios[0]
    if spec.tumor_type is TumorType.INTRAMEDULLARY:
        x = xc
    elif spec.tumor_type is TumorType.INTRADURAL_EXTRAMEDULLARY:
        x = xc if y > conus_y(cfg) else xc + 0.5 * (CORD_RADIUS + CSF_RADIUS)
    else:
        x = xc + DURA_RADIUS + rx + 0.5 * cfg.spacing[0]
    return x, y, z


def inject_tumor(phantom: Phantom, spec: TumorSpec) -> tuple[Volume, MaskVolume, MaskVolume]:
    """Paint an ellipsoidal tumor into a phantom.

    Returns ``(volume, mask, truth)``; ``mask`` carries the tumor as label
    100 and ``truth`` holds only labels {0, 100}. Raises
    :class:`TumorFitError` when the ellipsoid leaves its compartment.
    """
    cfg = phantom.config
    cx, cy, cz = tumor_center(phantom, spec)
    Z, Y, X = _grids(cfg)
    ax, ay, az = (spec.radius_mm * a for a in spec.axis_ratios)
    tumor = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 + ((Z - cz) / az) ** 2 <= 1.0
    if not tumor.any():
        raise TumorFitError("tumor is smaller than one voxel")
    lab = phantom.mask.data
    inside = lab[tumor]
    kind = spec.tumor_type
    if kind is TumorType.INTRAMEDULLARY:
        ok = np.all(inside == Label.CORD)
    elif kind is TumorType.INTRADURAL_EXTRAMEDULLARY:
        ok = np.all(inside == Label.CSF)
    else:
        dural = np.isin(lab, (Label.CSF, Label.CORD, Label.DURA))
        near = ndimage.binary_dilation(lab == Label.DURA, iterations=2)
        ok = not np.any(dural[tumor]) and np.any(near & tumor) and not tumor[[0, -1]].any()
    if not ok:
        raise TumorFitError(
            f"{kind.display} tumor of radius {spec.radius_mm} mm does not fit at {VERTEBRA_NAMES[spec.level]}")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, spec.seed, 7]))
    data = np.array(phantom.volume.data, dtype=np.float64)
    noise = rng.normal(0.0, cfg.sigma, size=int(tumor.sum())) if cfg.sigma > 0 else 0.0
    data[tumor] = np.clip(spec.intensity + noise, 0.0, 1.0)
    labels = np.array(lab)
    labels[tumor] = Label.TUMOR
    truth = np.where(tumor, Label.TUMOR, Label.BACKGROUND).astype(np.uint8)
    sp = phantom.volume.spacing
    return Volume(data, sp), MaskVolume(labels, sp), MaskVolume(truth, sp)


def truth_summary(truth: MaskVolume, spec: TumorSpec | None) -> dict:
    t = truth.data == Label.TUMOR
    out = {"tumor_voxels": int(t.sum())}
    if t.any():
        zz, yy, xx = np.nonzero(t)
        out["centroid_zyx"] = [float(zz.mean()), float(yy.mean()), float(xx.mean())]
        out["slices"] = sorted({int(z) for z in zz})
    if spec is not None:
        out["spec"] = spec.to_dict()
    return out


def write_sidecar(path, cfg: PhantomConfig, spec: TumorSpec | None, truth: MaskVolume | None) -> None:
    payload = {"config": asdict(cfg), "spacing": list(cfg.spacing)}
    payload["truth"] = truth_summary(truth, spec) if truth is not None else {"tumor_voxels": 0}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def feasible_levels(tumor_type: TumorType, cfg: PhantomConfig = PhantomConfig()) -> list[int]:
    """Levels at which the default placement rule has room for a ~3 mm tumor."""
    bounds = level_bounds(cfg)
    cone = conus_y(cfg)
    out = []
    for code, (top, bot) in bounds.items():
        y = top + 0.45 * (bot - top)
        has_cord = y < cone - CORD_RADIUS
        if tumor_type is TumorType.INTRAMEDULLARY and not has_cord:
            continue
        if tumor_type is TumorType.INTRADURAL_EXTRAMEDULLARY and y < cone + 1.0:
            continue
        out.append(code)
    return out


def random_tumor_spec(rng: np.random.Generator, cfg: PhantomConfig = PhantomConfig(),
                      tumor_type: TumorType | None = None, radius_range=(2.5, 3.4)) -> TumorSpec:
    kind = TumorType(int(rng.integers(0, 3))) if tumor_type is None else TumorType.parse(tumor_type)
    levels = feasible_levels(kind, cfg)
    level = levels[int(rng.integers(0, len(levels)))]
    radius = float(rng.uniform(*radius_range))
    return TumorSpec(kind, level, round(radius, 3), seed=int(rng.integers(0, 2**31)))
