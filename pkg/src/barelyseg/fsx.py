"""Frequency (amplitude) Mix-Up and cuboid spatial Mix-Up for 3D volumes.

Spectra are full 3D DFTs over the last three axes with the zero-frequency
bin shifted to the centre. Any leading axes (channels) are carried along.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BLEND_MODES = ("literal_eq4", "convex_inside_mask")
SPATIAL = (-3, -2, -1)


class SymmetryViolation(ValueError):
    """A spectrum whose inverse transform is not (numerically) real."""


@dataclass(frozen=True)
class FsxConfig:
    alpha_range: tuple[float, float] = (0.0, 1.0)
    beta: float = 0.1
    cutmix_ratio_range: tuple[float, float] = (0.25, 0.5)
    blend_mode: str = "literal_eq4"

    def __post_init__(self):
        lo, hi = self.alpha_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"alpha_range must satisfy 0 <= lo <= hi <= 1, got {self.alpha_range}")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        r_lo, r_hi = self.cutmix_ratio_range
        if not 0 < r_lo <= r_hi <= 1:
            raise ValueError(f"cutmix_ratio_range must satisfy 0 < lo <= hi <= 1, got {self.cutmix_ratio_range}")
        if self.blend_mode not in BLEND_MODES:
            raise ValueError(f"blend_mode must be one of {BLEND_MODES}")

    def sample_alpha(self, rng: np.random.Generator) -> float:
        lo, hi = self.alpha_range
        return float(rng.uniform(lo, hi))


@dataclass
class Spectrum:
    amplitude: np.ndarray
    phase: np.ndarray


def analyze(volume: np.ndarray) -> Spectrum:
    f = np.fft.fftshift(np.fft.fftn(np.asarray(volume, dtype=np.float64), axes=SPATIAL), axes=SPATIAL)
    return Spectrum(np.abs(f), np.angle(f))


def reconstruct(spectrum: Spectrum, strict: bool = True) -> tuple[np.ndarray, float]:
    """Inverse transform. Returns ``(real part, max |imaginary part|)``.

    With ``strict`` a residual above ``1e-6 * max amplitude`` raises
    :class:`SymmetryViolation`.
    """
    f = spectrum.amplitude * np.exp(1j * spectrum.phase)
    x = np.fft.ifftn(np.fft.ifftshift(f, axes=SPATIAL), axes=SPATIAL)
    residual = float(np.abs(x.imag).max())
    peak = float(spectrum.amplitude.max())
    if strict and residual > 1e-6 * max(peak, 1e-300):
        raise SymmetryViolation(f"imaginary residual {residual:.3e} vs peak amplitude {peak:.3e}")
    return x.real, residual


def _band(n: int, beta: float) -> tuple[int, int]:
    """Start/stop of the centred, negation-symmetric band along one axis."""
    width = int(np.ceil(beta * n - 1e-12))
    if width >= n:
        return 0, n
    if width == 0:
        return 0, 0
    half = width // 2  # odd width 2*half+1 >= width, still <= n here
    centre = n // 2
    return centre - half, centre + half + 1


def center_mask(shape, beta: float) -> np.ndarray:
    """Binary low-frequency cuboid (in centred coordinates) over ``shape[-3:]``.

    Per axis the band has ``ceil(beta * n)`` bins rounded up to the next odd
    count, so that the mask is invariant under frequency negation.
    """
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    spatial = tuple(shape[-3:])
    mask = np.zeros(spatial, dtype=bool)
    bounds = [_band(n, beta) for n in spatial]
    mask[tuple(slice(a, b) for a, b in bounds)] = True
    return mask


def frequency_mixup(
    x_u: np.ndarray,
    x_v: np.ndarray,
    alpha: float,
    mask: np.ndarray,
    blend_mode: str = "literal_eq4",
    clamp: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix amplitude spectra of ``x_u`` (original) and ``x_v`` (synthetic).

    Returns ``(x_v_tilde, x_u_tilde)``: the first keeps the phase of ``x_v``,
    the second is built with the roles of the two inputs swapped and keeps the
    phase of ``x_u``.
    """
    x_u = np.asarray(x_u)
    x_v = np.asarray(x_v)
    if x_u.shape != x_v.shape:
        raise ValueError(f"shape mismatch: {x_u.shape} vs {x_v.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if mask.shape != x_u.shape[-3:]:
        raise ValueError(f"mask shape {mask.shape} != spatial shape {x_u.shape[-3:]}")
    om = mask.astype(np.float64)
    su, sv = analyze(x_u), analyze(x_v)

    def blend(a_keep, a_other):
        if blend_mode == "literal_eq4":
            return (1 - alpha) * (1 - om) * a_keep + alpha * om * a_other
        if blend_mode == "convex_inside_mask":
            return (1 - om) * a_keep + om * ((1 - alpha) * a_keep + alpha * a_other)
        raise ValueError(f"unknown blend_mode {blend_mode!r}")

    xt_v, _ = reconstruct(Spectrum(blend(su.amplitude, sv.amplitude), sv.phase))
    xt_u, _ = reconstruct(Spectrum(blend(sv.amplitude, su.amplitude), su.phase))
    if clamp:
        xt_v, xt_u = np.clip(xt_v, 0.0, 1.0), np.clip(xt_u, 0.0, 1.0)
    return xt_v.astype(x_v.dtype, copy=False), xt_u.astype(x_u.dtype, copy=False)


@lru_cache(maxsize=64)
def _feasible_sides(shape: tuple[int, int, int], lo: float, hi: float) -> np.ndarray:
    total = float(np.prod(shape))
    grids = np.meshgrid(*[np.arange(1, n + 1) for n in shape], indexing="ij")
    frac = grids[0] * grids[1] * grids[2] / total
    ok = (frac >= lo - 1e-12) & (frac <= hi + 1e-12)
    return np.stack([g[ok] for g in grids], axis=1)


@dataclass
class SpatialMask:
    mask: np.ndarray
    corner: tuple[int, int, int]
    sides: tuple[int, int, int]

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def random_cuboid_mask(shape, ratio_range, rng: np.random.Generator) -> SpatialMask:
    """One axis-aligned cuboid of ones covering a fraction within ``ratio_range``."""
    shape = tuple(int(n) for n in shape[-3:])
    lo, hi = (float(r) for r in ratio_range)
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"invalid ratio range {ratio_range}")
    total = float(np.prod(shape))
    target = rng.uniform(lo, hi)
    scale = target ** (1 / 3)
    sides = [int(np.clip(round(n * scale), 1, n)) for n in shape]
    frac = sides[0] * sides[1] * sides[2] / total
    if not lo - 1e-12 <= frac <= hi + 1e-12:
        feasible = _feasible_sides(shape, lo, hi)
        if len(feasible) == 0:
            raise ValueError(f"no cuboid in {shape} realizes a fraction within {ratio_range}")
        fr = feasible.prod(axis=1) / total
        # closest feasible fraction, then most cube-like
        spread = feasible.max(axis=1) / feasible.min(axis=1)
        best = np.lexsort((spread, np.abs(fr - target)))[0]
        sides = [int(v) for v in feasible[best]]
    corner = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(shape, sides))
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(c, c + s) for c, s in zip(corner, sides))] = True
    return SpatialMask(mask, corner, tuple(sides))


def spatial_mixup(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``a * M + b * (1 - M)``; ``M`` spans the trailing spatial axes."""
    a, b = np.asarray(a), np.asarray(b)
    m = np.asarray(mask)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-m.ndim :] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match spatial shape {a.shape[-m.ndim:]}")
    return np.where(m.astype(bool), a, b)


def harden(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lowest class index."""
    return np.argmax(probs, axis=0).astype(np.int64)
