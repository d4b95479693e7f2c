"""Vertebra labeling and tumor-to-vertebra fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import VERTEBRA_CODES, VERTEBRA_NAMES, Label, MaskVolume, check_geometry, save_pgm

_CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class VertebraLabeling:
    mask: MaskVolume  # labels 10..16 only, 0 elsewhere
    bboxes: dict = field(default_factory=dict)  # code -> ((z0, y0, x0), (z1, y1, x1)) inclusive
    centroids: dict = field(default_factory=dict)  # code -> (z, y, x) voxel coordinates

    @property
    def codes(self) -> list[int]:
        return sorted(self.centroids)


@dataclass
class LocalizationReport:
    impacted: list[int]
    origin: int
    overlap_voxels: dict
    distances_mm: dict

    def to_dict(self) -> dict:
        name = VERTEBRA_NAMES.get
        return {
            "impacted": [name(c) for c in self.impacted],
            "origin": name(self.origin),
            "overlap_voxels": {name(c): n for c, n in self.overlap_voxels.items()},
            "distances_mm": {name(c): d for c, d in self.distances_mm.items()},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _describe(labels: np.ndarray, codes) -> tuple[dict, dict]:
    bboxes, cents = {}, {}
    objs = ndimage.find_objects(labels)
    for code in codes:
        sl = objs[code - 1] if code - 1 < len(objs) else None
        if sl is None:
            continue
        bboxes[code] = (tuple(s.start for s in sl), tuple(s.stop - 1 for s in sl))
        cents[code] = tuple(float(c) for c in ndimage.center_of_mass(labels == code))
    return bboxes, cents


def label_vertebrae(mask: MaskVolume) -> VertebraLabeling:
    """Assign T11..L5 to vertebra components in cranio-caudal order.

    Masks already carrying codes 10-16 are kept as labelled. Otherwise the
    generic vertebra label is split into 26-connected components, sorted by
    centroid row (row 0 is cranial) and named from T11 down; with fewer than
    seven components the naming anchors at L5 and counts upward.
    """
    data = mask.data
    coded = np.isin(data, VERTEBRA_CODES)
    if coded.any():
        labels = np.where(coded, data, 0).astype(np.uint8)
    else:
        comp, n = ndimage.label(data == Label.VERTEBRA, structure=_CONN26)
        if n == 0:
            raise ValueError("mask contains no vertebra components")
        if n > len(VERTEBRA_CODES):
            raise ValueError(f"found {n} vertebra components, at most {len(VERTEBRA_CODES)} allowed")
        rows = ndimage.center_of_mass(np.ones_like(comp), comp, range(1, n + 1))
        order = np.argsort([r[1] for r in rows], kind="stable") + 1
        codes = VERTEBRA_CODES[len(VERTEBRA_CODES) - n:]
        lut = np.zeros(n + 1, dtype=np.uint8)
        lut[order] = codes
        labels = lut[comp]
    bboxes, cents = _describe(labels, VERTEBRA_CODES)
    ys = [cents[c][1] for c in sorted(cents)]
    if ys != sorted(ys):
        raise ValueError("vertebra codes are not in cranio-caudal order")
    return VertebraLabeling(MaskVolume(labels, mask.spacing), bboxes, cents)


def fuse_tumor_with_labels(tumor: MaskVolume, labeling: VertebraLabeling,
                           adjacency_mm: float = 5.0) -> LocalizationReport:
    """Report the vertebrae a tumor touches and the one it most likely arises from.

    Without any voxel overlap, ``impacted`` falls back to vertebrae within
    ``adjacency_mm`` of the tumor surface, and to the nearest vertebra by
    centroid distance when none is that close.
    """
    check_geometry(tumor, labeling.mask)
    t = tumor.data == Label.TUMOR
    if not t.any():
        raise ValueError("tumor mask is empty")
    vl = labeling.mask.data
    codes = labeling.codes
    counts = np.bincount(vl[t], minlength=max(VERTEBRA_CODES) + 1)
    overlap = {c: int(counts[c]) for c in codes}
    spacing = np.array(tumor.spacing[::-1])  # (z, y, x) mm
    tc = np.array(ndimage.center_of_mass(t))
    distances = {}
    for c in codes:
        if overlap[c] == 0:
            distances[c] = float(np.linalg.norm((np.array(labeling.centroids[c]) - tc) * spacing))

    hit = [c for c in codes if overlap[c] > 0]
    if hit:
        impacted = hit
        best = max(overlap[c] for c in hit)
        origin = min(c for c in hit if overlap[c] == best)  # lower code is more cranial
    else:
        # distance (mm) from every voxel to the nearest tumor voxel
        dist_to_tumor = ndimage.distance_transform_edt(~t, sampling=spacing)
        impacted = [c for c in codes if float(dist_to_tumor[vl == c].min()) <= adjacency_mm]
        origin = min(distances, key=lambda c: (distances[c], c))
        if not impacted:
            impacted = [origin]  # nothing within range: report the level the tumor sits at
        elif origin not in impacted:
            origin = min(impacted, key=lambda c: (distances[c], c))
    return LocalizationReport(impacted, origin, overlap, distances)


def write_overlay(volume, tumor: MaskVolume, labeling: VertebraLabeling, out_dir, stem: str = "overlay") -> list[Path]:
    """Per-slice PGM: anatomy dimmed, vertebrae shaded by level, tumor boundary at full white."""
    check_geometry(tumor, labeling.mask)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = tumor.data == Label.TUMOR
    paths = []
    for z in range(tumor.depth):
        img = 0.5 * np.asarray(volume.data[z], dtype=np.float64)
        vz = labeling.mask.data[z]
        shade = np.where(vz > 0, 0.5 + 0.05 * (vz.astype(np.float64) - Label.T11), 0.0)
        img = np.maximum(img, np.where(vz > 0, shade, 0))
        edge = t[z] & ~ndimage.binary_erosion(t[z])
        img[edge] = 1.0
        p = out / f"{stem}_z{z:03d}.pgm"
        save_pgm(np.clip(img, 0, 1), p)
        paths.append(p)
    return paths
