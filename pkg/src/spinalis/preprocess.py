"""Slice-gap reconstruction, hole regeneration and directional-band denoising."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Slice, Volume


@dataclass(frozen=True)
class InterpConfig:
    gap_mm: float = 3.0
    target_spacing_mm: float = 1.0
    kernel_a: float = -0.5

    def __post_init__(self):
        if not self.gap_mm > 0 or not self.target_spacing_mm > 0:
            raise ValueError("gap_mm and target_spacing_mm must be positive")
        if self.target_spacing_mm > self.gap_mm:
            raise ValueError("target_spacing_mm must not exceed gap_mm")

    @property
    def factor(self) -> int:
        return max(1, int(round(self.gap_mm / self.target_spacing_mm)))


@dataclass(frozen=True)
class DenoiseConfig:
    scales: int = 2
    directions_per_scale: int = 8
    threshold: float = 0.04

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.directions_per_scale < 4:
            raise ValueError("directions_per_scale must be >= 4")
        if not self.threshold >= 0:
            raise ValueError("threshold must be nonnegative")


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic-convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    xn, xf = x[near], x[far]
    out[near] = (a + 2) * xn**3 - (a + 3) * xn**2 + 1
    out[far] = a * xf**3 - 5 * a * xf**2 + 8 * a * xf - 4 * a
    return out


def _bilinear_plane(plane: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(int), h - 2) if h > 1 else np.zeros_like(r, dtype=int)
    c0 = np.minimum(np.floor(c).astype(int), w - 2) if w > 1 else np.zeros_like(c, dtype=int)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    return ((1 - fr) * (1 - fc) * plane[r0, c0] + (1 - fr) * fc * plane[r0, c1]
            + fr * (1 - fc) * plane[r1, c0] + fr * fc * plane[r1, c1])


def reconstruct_slices(v: Volume, cfg: InterpConfig = InterpConfig(), in_plane_scale: float = 1.0) -> Volume:
    """Fill the acquisition gap with cubic-convolution planes along z.

    Acquired planes land on every ``cfg.factor``-th output plane and are
    copied verbatim. Intermediate planes use the four nearest acquired
    planes; the out-of-range supports at either end are extrapolated with
    Keys' boundary rule ``f(-1) = 3 f(0) - 3 f(1) + f(2)``.

    ``in_plane_scale`` != 1 additionally resamples each plane onto a grid
    scaled by that factor (bilinear); acquired planes are then resampled too.
    """
    if v.depth < 4:
        raise ValueError("cubic reconstruction needs at least 4 acquired planes")
    k = cfg.factor
    src = v.data.astype(np.float64)
    ext = np.concatenate([
        (3 * src[0] - 3 * src[1] + src[2])[None],
        src,
        (3 * src[-1] - 3 * src[-2] + src[-3])[None],
    ])
    out_depth = k * (v.depth - 1) + 1
    out = np.empty((out_depth,) + src.shape[1:], dtype=np.float64)
    weights = [cubic_kernel(np.array([1 + j / k, j / k, 1 - j / k, 2 - j / k]), cfg.kernel_a) for j in range(k)]
    for i in range(v.depth - 1):
        out[i * k] = src[i]
        for j in range(1, k):
            w = weights[j]
            # ext index i+1 is acquired plane i
            out[i * k + j] = w[0] * ext[i] + w[1] * ext[i + 1] + w[2] * ext[i + 2] + w[3] * ext[i + 3]
    out[-1] = src[-1]
    sx, sy, _ = v.spacing
    spacing = (sx, sy, cfg.gap_mm / k)
    if in_plane_scale != 1.0:
        h, w_ = src.shape[1:]
        nh, nw = int(round(h * in_plane_scale)), int(round(w_ * in_plane_scale))
        rr, cc = np.meshgrid(np.linspace(0, h - 1, nh), np.linspace(0, w_ - 1, nw), indexing="ij")
        out = np.stack([_bilinear_plane(p, rr, cc) for p in out])
        spacing = (sx * (w_ - 1) / max(nw - 1, 1), sy * (h - 1) / max(nh - 1, 1), spacing[2])
    result = Volume(out, spacing)
    if in_plane_scale == 1.0:
        data = np.array(result.data)
        data[::k] = v.data
        result = Volume(data, spacing)
    return result


def _lagrange_fill(xs: np.ndarray, ys: np.ndarray, xq: np.ndarray) -> np.ndarray:
    out = np.zeros(len(xq), dtype=np.float64)
    for i in range(len(xs)):
        li = np.ones(len(xq))
        for j in range(len(xs)):
            if j != i:
                li *= (xq - xs[j]) / (xs[i] - xs[j])
        out += ys[i] * li
    return out


def _fill_lines(data: np.ndarray, hole: np.ndarray) -> np.ndarray:
    """Cubic fill of every hole run along axis 1 from the two nearest known samples per side."""
    out = data.copy()
    for r in np.flatnonzero(hole.any(axis=1)):
        row_hole = hole[r]
        known = np.flatnonzero(~row_hole)
        idx = np.flatnonzero(row_hole)
        # split into contiguous runs
        runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        for run in runs:
            left = known[known < run[0]][-2:]
            right = known[known > run[-1]][:2]
            xs = np.concatenate([left, right])
            out[r, run] = _lagrange_fill(xs.astype(float), data[r, xs], run.astype(float))
    return out


def bicubic_inpaint(s: Slice, hole: np.ndarray) -> Slice:
    """Regenerate ``hole`` pixels by separable cubic interpolation.

    A horizontal and a vertical pass each fit a cubic through the two
    nearest known samples on either side of every hole run; the two passes
    are averaged. Known pixels are left untouched.
    """
    hole = np.asarray(hole, dtype=bool)
    if hole.shape != s.data.shape:
        raise ValueError("hole mask shape does not match slice")
    if not hole.any():
        return s
    if hole.all():
        raise ValueError("hole covers the entire slice")
    margin = 2
    if (hole[:margin].any() or hole[-margin:].any()
            or hole[:, :margin].any() or hole[:, -margin:].any()):
        raise ValueError("hole must keep a 2-pixel margin from the slice border")
    data = s.data
    horiz = _fill_lines(data, hole)
    vert = _fill_lines(data.T, hole.T).T
    out = data.copy()
    out[hole] = 0.5 * (horiz[hole] + vert[hole])
    return s.with_data(out)


# ------------------------------------------------------------- denoising

def _meyer_nu(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x**4 * (35 - 84 * x + 70 * x**2 - 20 * x**3)


def _lowpass(rho: np.ndarray, cutoff: float) -> np.ndarray:
    """Smooth square-root step: 1 below 0.7*cutoff, 0 above 1.3*cutoff."""
    a, b = 0.7 * cutoff, 1.3 * cutoff
    return np.cos(0.5 * np.pi * _meyer_nu((rho - a) / (b - a)))


@lru_cache(maxsize=16)
def band_windows(shape: tuple[int, int], scales: int, directions: int) -> tuple[np.ndarray, ...]:
    """Frequency windows of the directional multiscale decomposition.

    The first window is the low-pass (DC) band, followed by ``directions``
    wedges per band-pass scale. The squared windows sum to one at every
    frequency, so analysis followed by synthesis with the same windows is
    the identity (a Parseval frame).
    """
    h, w = shape
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    rho = np.hypot(ky, kx)
    theta = np.mod(np.arctan2(ky, kx), np.pi)
    cutoffs = [0.5 * 2.0 ** (j - scales) for j in range(scales)]
    steps = [_lowpass(rho, c) for c in cutoffs]
    radial = [steps[0]]
    for j in range(1, scales):
        radial.append(np.sqrt(np.clip(steps[j] ** 2 - steps[j - 1] ** 2, 0, None)))
    radial.append(np.sqrt(np.clip(1.0 - steps[-1] ** 2, 0, None)))

    delta = np.pi / directions
    angular = []
    for l in range(directions):
        d = np.abs(np.mod(theta - l * delta + np.pi / 2, np.pi) - np.pi / 2)
        ang = np.where(d < delta, np.cos(0.5 * np.pi * _meyer_nu(d / delta)), 0.0)
        angular.append(ang)

    windows = [radial[0]]
    for band in radial[1:]:
        windows.extend(band * a for a in angular)
    # symmetrise under k -> -k (Nyquist rows/cols alias) so band coefficients stay real
    windows = [np.sqrt(0.5 * (win**2 + _mirror(win) ** 2)) for win in windows]
    for win in windows:
        win.setflags(write=False)
    return tuple(windows)


def _mirror(a: np.ndarray) -> np.ndarray:
    return np.roll(np.flip(a, axis=(0, 1)), shift=(1, 1), axis=(0, 1))


def band_decompose(img: np.ndarray, cfg: DenoiseConfig) -> list[np.ndarray]:
    spec = np.fft.fft2(img)
    return [np.real(np.fft.ifft2(win * spec))
            for win in band_windows(img.shape, cfg.scales, cfg.directions_per_scale)]


def band_reconstruct(coeffs: list[np.ndarray], cfg: DenoiseConfig) -> np.ndarray:
    shape = coeffs[0].shape
    acc = np.zeros(shape, dtype=np.complex128)
    for c, win in zip(coeffs, band_windows(shape, cfg.scales, cfg.directions_per_scale)):
        acc += win * np.fft.fft2(c)
    return np.real(np.fft.ifft2(acc))


def denoise(s: Slice, cfg: DenoiseConfig = DenoiseConfig()) -> Slice:
    """Hard-threshold the band-pass coefficients; the low-pass band is kept."""
    if s.height < 16 or s.width < 16:
        raise ValueError("denoise needs slices of at least 16x16")
    coeffs = band_decompose(s.data, cfg)
    kept = [coeffs[0]] + [np.where(np.abs(c) >= cfg.threshold, c, 0.0) for c in coeffs[1:]]
    return s.with_data(band_reconstruct(kept, cfg))


def preprocess_volume(v: Volume, denoise_cfg: DenoiseConfig | None = DenoiseConfig(),
                      interp_cfg: InterpConfig | None = None, denoise_first: bool = False) -> Volume:
    """Reconstruct (optional) then denoise every sagittal plane."""

    def _denoise(vol: Volume) -> Volume:
        if denoise_cfg is None:
            return vol
        planes = [denoise(Slice(p), denoise_cfg).data for p in vol.data]
        return Volume(np.stack(planes), vol.spacing)

    if denoise_first:
        v = _denoise(v)
        return reconstruct_slices(v, interp_cfg) if interp_cfg else v
    if interp_cfg is not None:
        v = reconstruct_slices(v, interp_cfg)
    return _denoise(v)
