"""Tumor extraction, CSF-guided gliding and rotation doubling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Label, MaskVolume, Slice, Volume, save_pgm, vertebra_code
from .phantom import TumorType
from .preprocess import bicubic_inpaint


class NoPlacementError(ValueError):
    """The tumor fits the CSF at no position along the path."""


@dataclass(frozen=True)
class TumorInstance:
    """A tumor cut out of a slice.

    ``patch`` is the source-slice crop over the bounding box and ``mask``
    marks the tumor pixels inside it; ``origin`` is the bounding box's
    top-left corner in the source slice.
    """

    patch: np.ndarray
    mask: np.ndarray
    origin: tuple[int, int]
    tumor_type: TumorType | None = None
    source_slice: int = 0

    @property
    def bbox(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def centroid(self) -> tuple[float, float]:
        rr, cc = np.nonzero(self.mask)
        return float(rr.mean()), float(cc.mean())

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def pixels(self) -> list[tuple[int, int, float]]:
        rr, cc = np.nonzero(self.mask)
        return [(int(r), int(c), float(self.patch[r, c])) for r, c in zip(rr, cc)]

    @property
    def source_centroid(self) -> tuple[float, float]:
        r, c = self.centroid
        return r + self.origin[0], c + self.origin[1]


@dataclass(frozen=True)
class CsfPath:
    points: np.ndarray  # (n, 2) row, col
    tangents: np.ndarray  # radians, atan2(d_row, d_col)
    vertebra_level: np.ndarray

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("a CSF path needs at least two points")

    @property
    def arc_length(self) -> np.ndarray:
        steps = np.hypot(*np.diff(self.points, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True)
class GlideConfig:
    step_px: int = 3
    start_level: int = Label.T11
    end_level: int = Label.L5
    csf_fit_dilation_px: int = 2

    def __post_init__(self):
        if self.step_px < 1:
            raise ValueError("step_px must be >= 1")
        if self.csf_fit_dilation_px < 0:
            raise ValueError("csf_fit_dilation_px must be nonnegative")
        object.__setattr__(self, "start_level", vertebra_code(self.start_level))
        object.__setattr__(self, "end_level", vertebra_code(self.end_level))


@dataclass(frozen=True)
class AugmentConfig:
    glide: GlideConfig = GlideConfig()
    min_scale: float = 0.5
    # intradural space the tumor must fit: CSF, cord and the removed tumor
    csf_labels: tuple[int, ...] = (Label.CSF, Label.CORD, Label.TUMOR)
    angle_range: tuple[float, float] = (1.0, 10.0)


@dataclass
class Placement:
    image: Slice
    truth: np.ndarray
    position_index: int
    center: tuple[float, float]
    angle_rad: float
    scale: float

    def __iter__(self):
        yield self.image
        yield self.truth


@dataclass
class AugmentedSample:
    image: Slice
    truth: np.ndarray
    record: dict = field(default_factory=dict)


def extract_tumor(s: Slice, tumor_mask, tumor_type=None) -> tuple[TumorInstance, Slice]:
    """Split a slice into the tumor alone and the host with the tumor regenerated."""
    mask = np.asarray(tumor_mask, dtype=bool)
    if mask.shape != s.data.shape:
        raise ValueError("tumor mask shape does not match slice")
    if not mask.any():
        raise ValueError("tumor mask is empty")
    _, n = ndimage.label(mask)
    if n != 1:
        raise ValueError(f"tumor mask must be one 4-connected region, found {n}")
    rows, cols = np.nonzero(mask)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    if r0 < 2 or c0 < 2 or r1 > s.height - 2 or c1 > s.width - 2:
        raise ValueError("tumor touches the slice border")
    inst = TumorInstance(
        patch=s.data[r0:r1, c0:c1].copy(),
        mask=mask[r0:r1, c0:c1].copy(),
        origin=(int(r0), int(c0)),
        tumor_type=None if tumor_type is None else TumorType.parse(tumor_type),
        source_slice=s.source_index,
    )
    return inst, bicubic_inpaint(s, mask)


def _level_rows(mask2d: np.ndarray) -> dict[int, tuple[int, int]]:
    out = {}
    for code in range(Label.T11, Label.L5 + 1):
        rows = np.flatnonzero((mask2d == code).any(axis=1))
        if rows.size:
            out[code] = (int(rows.min()), int(rows.max()))
    return out


def path_tangents(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    d = np.empty_like(p)
    d[1:-1] = p[2:] - p[:-2]
    d[0] = p[1] - p[0]
    d[-1] = p[-1] - p[-2]
    return np.arctan2(d[:, 0], d[:, 1])


def extract_csf_path(mask2d, start_level=Label.T11, end_level=Label.L5,
                     csf_labels=(Label.CSF,)) -> CsfPath:
    """Centre line of the CSF between the top of ``start_level`` and the bottom of ``end_level``.

    One point per image row: the mean column of that row's CSF pixels.
    """
    mask2d = np.asarray(mask2d.data if isinstance(mask2d, Slice) else mask2d)
    csf = np.isin(mask2d, csf_labels)
    if not csf.any():
        raise ValueError("no CSF pixels in slice")
    levels = _level_rows(mask2d)
    start, end = vertebra_code(start_level), vertebra_code(end_level)
    if start not in levels or end not in levels:
        raise ValueError("requested vertebra levels are not present in the slice")
    r_start, r_end = levels[start][0], levels[end][1]
    rows = np.arange(r_start, r_end + 1)
    has = csf[rows].any(axis=1)
    if not has.all():
        raise ValueError("CSF does not span the requested vertebra levels")
    cols = np.arange(csf.shape[1])
    centre = np.array([cols[csf[r]].mean() for r in rows])
    points = np.stack([rows.astype(np.float64), centre], axis=1)

    codes = sorted(levels)
    mids = np.array([(levels[c][0] + levels[c][1]) / 2 for c in codes])
    vlev = np.empty(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        inside = [c for c in codes if levels[c][0] <= r <= levels[c][1]]
        vlev[i] = inside[0] if inside else codes[int(np.argmin(np.abs(mids - r)))]
    return CsfPath(points, path_tangents(points), vlev)


def scale_schedule(z: int, depth: int, min_scale: float) -> float:
    """Tent profile: ``min_scale`` at the outer slices, 1.0 at the centre slice."""
    if not 0 <= z < depth:
        raise ValueError(f"slice {z} outside [0, {depth})")
    if not 0 < min_scale <= 1:
        raise ValueError("min_scale must lie in (0, 1]")
    if depth <= 1:
        return 1.0
    centre = (depth - 1) / 2
    return min_scale + (1 - min_scale) * (1 - abs(z - centre) / centre)


def _bilinear(img: np.ndarray, r: np.ndarray, c: np.ndarray, fill: float = 0.0) -> np.ndarray:
    h, w = img.shape
    inside = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
    rc = np.clip(r, 0, h - 1)
    cc = np.clip(c, 0, w - 1)
    r0 = np.clip(np.floor(rc).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(cc).astype(int), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr, fc = rc - r0, cc - c0
    val = ((1 - fr) * (1 - fc) * img[r0, c0] + (1 - fr) * fc * img[r0, c1]
           + fr * (1 - fc) * img[r1, c0] + fr * fc * img[r1, c1])
    return np.where(inside, val, fill)


def _nearest(img: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ri = np.rint(r).astype(int)
    ci = np.rint(c).astype(int)
    inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    out = np.zeros(r.shape, dtype=img.dtype)
    out[inside] = img[ri[inside], ci[inside]]
    return out


def paste_tumor(host: Slice, t: TumorInstance, center: tuple[float, float] | None = None,
                angle_rad: float = 0.0, scale: float = 1.0) -> tuple[Slice, np.ndarray]:
    """Composite ``t`` over ``host`` rotated by ``angle_rad`` and scaled about its centroid.

    ``center`` is where the tumor centroid lands (defaults to its source
    position). Intensities are resampled bilinearly and the truth mask by
    nearest neighbour; tumor pixels replace host pixels.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    cr, cc = t.centroid
    if center is None:
        center = t.source_centroid
    ctr_r, ctr_c = center
    h, w = t.mask.shape
    radius = scale * math.hypot(h, w) / 2 + 2
    r_lo, r_hi = int(math.floor(ctr_r - radius)), int(math.ceil(ctr_r + radius)) + 1
    c_lo, c_hi = int(math.floor(ctr_c - radius)), int(math.ceil(ctr_c + radius)) + 1
    rr, ccol = np.mgrid[r_lo:r_hi, c_lo:c_hi].astype(np.float64)
    dr, dc = rr - ctr_r, ccol - ctr_c
    cos, sin = math.cos(angle_rad), math.sin(angle_rad)
    # inverse rotation back into patch coordinates
    src_r = (cos * dr - sin * dc) / scale + cr
    src_c = (sin * dr + cos * dc) / scale + cc
    truth_local = _nearest(t.mask.astype(np.uint8), src_r, src_c).astype(bool)
    vals = _bilinear(t.patch, src_r, src_c)

    out = np.array(host.data)
    truth = np.zeros(host.data.shape, dtype=bool)
    valid = truth_local & (rr >= 0) & (rr < host.height) & (ccol >= 0) & (ccol < host.width)
    ri, ci = rr[valid].astype(int), ccol[valid].astype(int)
    out[ri, ci] = vals[valid]
    truth[ri, ci] = True
    return host.with_data(out), truth


def glide_tumor(host: Slice, path: CsfPath, t: TumorInstance, cfg: GlideConfig, csf_mask,
                scale: float = 1.0) -> list[Placement]:
    """Slide ``t`` along ``path`` every ``cfg.step_px`` of arc length.

    At each stop the tumor is rotated by the change in path tangent
    relative to its source position (or to vertical when the source lies
    off the path), centred on the path, and kept only when its truth mask
    fits inside the CSF dilated by ``cfg.csf_fit_dilation_px``.
    """
    csf = np.asarray(csf_mask, dtype=bool)
    if csf.shape != host.data.shape:
        raise ValueError("CSF mask shape does not match host slice")
    allowed = ndimage.binary_dilation(csf, iterations=cfg.csf_fit_dilation_px) if cfg.csf_fit_dilation_px else csf
    arc = path.arc_length
    tang = np.unwrap(path.tangents)
    src = np.asarray(t.source_centroid)
    d = np.hypot(*(path.points - src).T)
    ref = tang[int(np.argmin(d))] if d.min() <= max(t.mask.shape) else math.pi / 2
    out = []
    stops = np.arange(0.0, arc[-1] + 1e-9, cfg.step_px)
    for k, s in enumerate(stops):
        r = float(np.interp(s, arc, path.points[:, 0]))
        c = float(np.interp(s, arc, path.points[:, 1]))
        angle = float(np.interp(s, arc, tang)) - ref
        img, truth = paste_tumor(host, t, (r, c), angle, scale)
        if not truth.any() or np.any(truth & ~allowed):
            continue
        if truth.sum() < 0.5 * t.area * scale**2:
            continue  # clipped by the frame
        out.append(Placement(img, truth, k, (r, c), angle, scale))
    if not out:
        raise NoPlacementError("tumor fits the CSF at no position along the path")
    return out


def _rotate(data: np.ndarray, angle_deg: float, nearest: bool) -> np.ndarray:
    h, w = data.shape
    cr, cc = (h - 1) / 2, (w - 1) / 2
    rr, ccol = np.mgrid[0:h, 0:w].astype(np.float64)
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    dr, dc = rr - cr, ccol - cc
    # positive angle turns the picture counter-clockwise on screen
    src_r = cos * dr - sin * dc + cr
    src_c = sin * dr + cos * dc + cc
    if nearest:
        return _nearest(data, src_r, src_c)
    return _bilinear(data, src_r, src_c, 0.0)


def _signed_angle(angle_deg: float, direction: str) -> float:
    if not 1.0 <= angle_deg <= 10.0:
        raise ValueError("rotation angle must lie in [1, 10] degrees")
    direction = direction.lower()
    if direction not in ("left", "right"):
        raise ValueError("direction must be 'left' or 'right'")
    return angle_deg if direction == "left" else -angle_deg


def rotate_augment(s: Slice, angle_deg: float, direction: str) -> Slice:
    """Rotate about the slice centre (bilinear); uncovered pixels become 0."""
    return s.with_data(_rotate(s.data, _signed_angle(angle_deg, direction), nearest=False))


def rotate_mask(mask: np.ndarray, angle_deg: float, direction: str) -> np.ndarray:
    return _rotate(np.asarray(mask), _signed_angle(angle_deg, direction), nearest=True)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def augment_dataset(corpus, cfg: AugmentConfig = AugmentConfig(), seed: int = 0, out_dir=None,
                    source_ids=None, tumor_types=None) -> tuple[list[AugmentedSample], list[dict]]:
    """Glide every volume's tumor through its tumor-bearing slices, then add one rotated copy of each.

    The reference tumor is the volume's largest tumor cross-section. For
    every slice ``z`` that contains tumor, that slice's own tumor is removed
    and the reference is glided along the slice's CSF at
    ``scale_schedule(z)``. Each glide output is then duplicated with a seeded
    rotation of 1-10 degrees left or right, so the result holds exactly twice
    the glide outputs. Returns the samples and the manifest records.
    """
    rng = np.random.default_rng(seed)
    glide_samples: list[AugmentedSample] = []
    corpus = list(corpus)
    ids = list(source_ids) if source_ids is not None else [f"src{i:04d}" for i in range(len(corpus))]
    for (vol, mask), sid, ttype in zip(corpus, ids, tumor_types or [None] * len(corpus)):
        if not isinstance(mask, MaskVolume):
            raise TypeError("corpus masks must be MaskVolume instances")
        tumor = mask.data == Label.TUMOR
        if not tumor.any():
            continue
        ref_z = int(np.argmax(tumor.sum(axis=(1, 2))))
        ref_slice = Slice(vol.data[ref_z], ref_z)
        ref_inst, _ = extract_tumor(ref_slice, _largest_component(tumor[ref_z]), ttype)
        for z in np.flatnonzero(tumor.any(axis=(1, 2))):
            z = int(z)
            labels = mask.data[z]
            sl = Slice(vol.data[z], z)
            try:
                _, host = extract_tumor(sl, _largest_component(tumor[z]), ttype)
                path = extract_csf_path(labels, cfg.glide.start_level, cfg.glide.end_level, cfg.csf_labels)
            except ValueError:
                continue
            # any remaining tumor pixels outside the largest component are left in the host
            scale = scale_schedule(z, vol.depth, cfg.min_scale)
            try:
                placements = glide_tumor(host, path, ref_inst, cfg.glide, np.isin(labels, cfg.csf_labels), scale)
            except NoPlacementError:
                continue
            for p in placements:
                glide_samples.append(AugmentedSample(p.image, p.truth, {
                    "source_id": sid, "slice_z": z, "position_index": p.position_index,
                    "scale": round(float(scale), 6), "angle_deg": 0.0, "direction": "none",
                }))
    samples: list[AugmentedSample] = []
    for gs in glide_samples:
        angle = float(rng.uniform(*cfg.angle_range))
        direction = "left" if rng.random() < 0.5 else "right"
        rot = AugmentedSample(rotate_augment(gs.image, angle, direction), rotate_mask(gs.truth, angle, direction),
                              {**gs.record, "angle_deg": round(angle, 6), "direction": direction})
        samples.extend([gs, rot])
    samples.sort(key=lambda s: (s.record["source_id"], s.record["slice_z"], s.record["position_index"],
                                s.record["direction"] != "none"))
    manifest = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        rec = dict(s.record)
        stem = f"{rec['source_id']}_z{rec['slice_z']:03d}_p{rec['position_index']:03d}_{'r' if rec['direction'] != 'none' else 'g'}"
        rec["output_path"] = f"{stem}.pgm"
        rec["truth_path"] = f"{stem}_truth.pgm"
        if out is not None:
            save_pgm(s.image, out / rec["output_path"])
            save_pgm(s.truth.astype(np.float64), out / rec["truth_path"])
        s.record = rec
        manifest.append(rec)
    if out is not None:
        write_manifest(manifest, out / "manifest.jsonl")
    return samples, manifest


MANIFEST_KEYS = ("source_id", "slice_z", "position_index", "scale", "angle_deg", "direction", "output_path",
                 "truth_path")


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in MANIFEST_KEYS}) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
