"""Volume and mask data model, label schema, slicing and SVOL/PGM file I/O.

Arrays are stored z-major: ``data[z, y, x]`` so that a C-order flatten is
x-fastest, then y, then z. ``z`` indexes sagittal slices, ``y`` runs
cranio-caudally (row 0 is cranial) and ``x`` runs antero-posteriorly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

SVOL_MAGIC = b"SVOL1 "
DEFAULT_INPLANE_SPACING = 1.0 / 3.0


class SvolFormatError(ValueError):
    """Raised for malformed or inconsistent SVOL / PGM files."""


class Label(IntEnum):
    BACKGROUND = 0
    CSF = 1
    CORD = 2
    DURA = 3
    T11 = 10
    T12 = 11
    L1 = 12
    L2 = 13
    L3 = 14
    L4 = 15
    L5 = 16
    VERTEBRA = 20
    TUMOR = 100


# cranial to caudal
VERTEBRA_CODES: tuple[int, ...] = tuple(range(Label.T11, Label.L5 + 1))
VERTEBRA_NAMES: dict[int, str] = {int(lab): lab.name for lab in Label if Label.T11 <= lab <= Label.L5}
VALID_LABELS = frozenset(int(lab) for lab in Label)


def vertebra_code(name: str | int) -> int:
    """Resolve ``"L3"`` / ``14`` / ``Label.L3`` to the integer code."""
    if isinstance(name, str):
        try:
            code = int(Label[name.upper()])
        except KeyError:
            raise ValueError(f"unknown vertebra name {name!r}") from None
    else:
        code = int(name)
    if code not in VERTEBRA_CODES:
        raise ValueError(f"{name!r} is not a T11..L5 vertebra code")
    return code


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError("spacing must have three components")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be positive and finite, got {sp}")
    return sp  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar intensity grid with physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (DEFAULT_INPLANE_SPACING, DEFAULT_INPLANE_SPACING, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def same_geometry(self, other) -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume) or isinstance(other, MaskVolume) != isinstance(self, MaskVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class MaskVolume(Volume):
    """Label grid sharing a :class:`Volume`'s geometry; values from :class:`Label`."""

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValueError(f"mask data must be a non-empty 3-D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise ValueError("mask labels must fit in u8")
        data = np.array(raw, dtype=np.uint8, copy=True)
        bad = np.setdiff1d(np.unique(data), np.fromiter(VALID_LABELS, dtype=np.int64))
        if bad.size:
            raise ValueError(f"labels not in schema: {bad.tolist()}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def labels(self) -> np.ndarray:
        return self.data

    def binary(self, label: int = Label.TUMOR) -> np.ndarray:
        return self.data == label


def check_geometry(a: Volume, b: Volume) -> None:
    if not a.same_geometry(b):
        raise ValueError(f"geometry mismatch: {a.shape}/{a.spacing} vs {b.shape}/{b.spacing}")


@dataclass(frozen=True, eq=False)
class Slice:
    """A 2-D sagittal plane; ``data[row, col]`` = ``data[y, x]``."""

    data: np.ndarray
    source_index: int = 0
    spacing: tuple[float, float] = field(default=(DEFAULT_INPLANE_SPACING, DEFAULT_INPLANE_SPACING))

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"slice data must be a non-empty 2-D array, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "Slice":
        return Slice(data, self.source_index, self.spacing)


def extract_slice(v: Volume, z: int) -> Slice:
    if not 0 <= z < v.depth:
        raise IndexError(f"slice index {z} out of range [0, {v.depth})")
    return Slice(v.data[z], source_index=z, spacing=(v.spacing[1], v.spacing[0]))


def insert_slice(v: Volume, z: int, s: Slice) -> Volume:
    """Return a copy of ``v`` with plane ``z`` replaced by ``s``."""
    if not 0 <= z < v.depth:
        raise IndexError(f"slice index {z} out of range [0, {v.depth})")
    if s.data.shape != (v.height, v.width):
        raise ValueError(f"slice shape {s.data.shape} does not match volume plane {(v.height, v.width)}")
    data = np.array(v.data)
    data[z] = s.data
    return type(v)(data, v.spacing)


def normalize_intensity(v: Volume) -> Volume:
    """Affine map of intensities onto [0, 1]; a constant volume maps to zeros."""
    d = v.data.astype(np.float64)
    lo, hi = d.min(), d.max()
    if hi <= lo:
        return Volume(np.zeros_like(d), v.spacing)
    out = (d - lo) / (hi - lo)
    return Volume(np.clip(out, 0.0, 1.0), v.spacing)


def normalize_array(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


# ---------------------------------------------------------------- SVOL I/O

def _encode_header(v: Volume) -> bytes:
    dtype = "u8" if isinstance(v, MaskVolume) else "f32"
    hdr = {
        "width": v.width,
        "height": v.height,
        "depth": v.depth,
        "sx": v.spacing[0],
        "sy": v.spacing[1],
        "sz": v.spacing[2],
        "dtype": dtype,
    }
    return SVOL_MAGIC + json.dumps(hdr).encode("ascii") + b"\n"


def encode_volume(v: Volume) -> bytes:
    if isinstance(v, MaskVolume):
        payload = np.ascontiguousarray(v.data, dtype="u1").tobytes()
    else:
        payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    return _encode_header(v) + payload


def decode_volume(raw: bytes) -> Volume:
    if not raw.startswith(SVOL_MAGIC):
        raise SvolFormatError("missing SVOL1 magic")
    nl = raw.find(b"\n")
    if nl < 0:
        raise SvolFormatError("unterminated SVOL header")
    try:
        hdr = json.loads(raw[len(SVOL_MAGIC):nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SvolFormatError(f"malformed SVOL header: {exc}") from None
    if not isinstance(hdr, dict):
        raise SvolFormatError("SVOL header is not a JSON object")
    missing = {"width", "height", "depth", "sx", "sy", "sz", "dtype"} - hdr.keys()
    if missing:
        raise SvolFormatError(f"SVOL header missing keys {sorted(missing)}")
    try:
        w, h, d = (int(hdr[k]) for k in ("width", "height", "depth"))
        spacing = tuple(float(hdr[k]) for k in ("sx", "sy", "sz"))
    except (TypeError, ValueError):
        raise SvolFormatError("non-numeric SVOL geometry") from None
    if min(w, h, d) < 1:
        raise SvolFormatError("SVOL dimensions must be positive")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise SvolFormatError(f"invalid spacing {spacing}")
    dtype = hdr["dtype"]
    if dtype not in ("f32", "u8"):
        raise SvolFormatError(f"unsupported dtype {dtype!r}")
    itemsize = 4 if dtype == "f32" else 1
    payload = raw[nl + 1:]
    n = w * h * d
    if len(payload) != n * itemsize:
        raise SvolFormatError(
            f"payload length mismatch: header declares {n} voxels ({n * itemsize} bytes), got {len(payload)} bytes"
        )
    if dtype == "u8":
        arr = np.frombuffer(payload, dtype="u1").reshape(d, h, w)
        return MaskVolume(arr, spacing)
    arr = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.all(np.isfinite(arr)):
        raise SvolFormatError("payload contains non-finite intensities")
    return Volume(arr, spacing)


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as SVOL; masks are written as u8, intensities as f32."""
    Path(path).write_bytes(encode_volume(v))


def load_volume(path) -> Volume:
    """Read an SVOL file. Returns a :class:`MaskVolume` when the dtype is u8."""
    return decode_volume(Path(path).read_bytes())


def payload_offset(raw: bytes) -> int:
    return raw.index(b"\n") + 1


# ----------------------------------------------------------------- PGM I/O

def save_pgm(s: Slice | np.ndarray, path) -> None:
    """Binary P5 PGM with linear quantisation of [0, 1] onto 0..255."""
    data = s.data if isinstance(s, Slice) else np.asarray(s, dtype=np.float64)
    q = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def load_pgm(path, source_index: int = 0) -> Slice:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SvolFormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise SvolFormatError("only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise SvolFormatError("only maxval 255 is supported")
    pixels = raw[pos + 1:pos + 1 + w * h]
    if len(pixels) != w * h:
        raise SvolFormatError("PGM payload length mismatch")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return Slice(arr / 255.0, source_index=source_index)
