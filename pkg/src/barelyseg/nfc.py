"""Slice-to-volume synthesis of labeled training pairs.

One annotated slice is cut into overlapping square windows, the windows are
stacked along depth, and every stacked plane is resized back to the slice's
height and width. Image and label go through identical geometry, so the
synthetic label only ever contains annotated pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import LabelVolume, SliceAnnotation, Volume, extract_slice

STACK_STRATEGIES = ("sequential", "random", "with_noise")


@dataclass(frozen=True)
class NfcConfig:
    window: float | int = 0.5  # float in (0, 1]: fraction of the shorter slice side
    stride: int = 8
    stack_strategy: str = "sequential"
    noise_insert_prob: float = 0.2
    image_interp: str = "bilinear"
    label_interp: str = "nearest"

    def __post_init__(self):
        if self.stack_strategy not in STACK_STRATEGIES:
            raise ValueError(f"stack_strategy must be one of {STACK_STRATEGIES}")
        if not 0 <= self.noise_insert_prob < 1:
            raise ValueError("noise_insert_prob must lie in [0, 1)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if isinstance(self.window, float) and not 0 < self.window <= 1:
            raise ValueError("fractional window must lie in (0, 1]")

    def window_size(self, height: int, width: int) -> int:
        side = min(height, width)
        if isinstance(self.window, float):
            k = max(1, int(np.floor(self.window * side)))
        else:
            k = int(self.window)
        if not 1 <= k <= side:
            raise ValueError(f"window {k} does not fit a {height}x{width} slice")
        return k


@dataclass
class PatchSequence:
    patches: np.ndarray  # (d, ..., k, k)
    origins: list[tuple[int, int]]

    def __len__(self):
        return len(self.origins)


def patch_count(height: int, width: int, k: int, s: int) -> int:
    return ((height - k) // s + 1) * ((width - k) // s + 1)


def divide(slice2d: np.ndarray, k: int, s: int) -> PatchSequence:
    """All ``k x k`` windows at stride ``s`` over the last two axes, row-major.

    Windows that would run past the far edge are dropped.
    """
    arr = np.asarray(slice2d)
    if arr.ndim < 2:
        raise ValueError("slice must have at least two axes")
    h, w = arr.shape[-2:]
    if s <= 0:
        raise ValueError(f"stride must be positive, got {s}")
    if k < 1 or k > h or k > w:
        raise ValueError(f"window {k} larger than slice {h}x{w}")
    origins = [(r, c) for r in range(0, h - k + 1, s) for c in range(0, w - k + 1, s)]
    patches = np.stack([arr[..., r : r + k, c : c + k] for r, c in origins])
    return PatchSequence(patches, origins)


def stack(
    image_patches: PatchSequence,
    label_patches: PatchSequence,
    strategy: str = "sequential",
    rng: np.random.Generator | None = None,
    noise_insert_prob: float = 0.2,
    noise_stats: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack patches along a new depth axis.

    Image patches shaped ``(d, C, k, k)`` give a ``(C, d', k, k)`` volume;
    label patches ``(d, k, k)`` give ``(d', k, k)``. ``d' == d`` except for
    ``with_noise``, which may insert extra noise/background planes.
    """
    img, lbl = image_patches.patches, label_patches.patches
    if len(img) == 0:
        raise ValueError("cannot stack an empty patch sequence")
    if len(img) != len(lbl):
        raise ValueError(f"image has {len(img)} patches but label has {len(lbl)}")
    if img.ndim == 3:
        img = img[:, None]
    if strategy == "sequential":
        planes, labels = list(img), list(lbl)
    elif strategy == "random":
        order = rng.permutation(len(img))
        planes, labels = list(img[order]), list(lbl[order])
    elif strategy == "with_noise":
        if noise_stats is None:
            noise_stats = (float(img.mean()), float(img.std()))
        mean, std = noise_stats
        planes, labels = [], []
        for p, l in zip(img, lbl):
            if rng.random() < noise_insert_prob:
                noise = np.clip(rng.normal(mean, std, size=p.shape), 0.0, 1.0)
                planes.append(noise.astype(img.dtype))
                labels.append(np.zeros_like(l))
            planes.append(p)
            labels.append(l)
    else:
        raise ValueError(f"unknown stack strategy {strategy!r}")
    return np.stack(planes, axis=1), np.stack(labels)


def _corner_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize(volume: np.ndarray, height: int, width: int, interp: str = "bilinear") -> np.ndarray:
    """Resize every plane of ``(..., D, h, w)`` to ``(height, width)``.

    Sampling is corner-aligned: output corners coincide with input corners.
    """
    if height < 1 or width < 1:
        raise ValueError("target dims must be >= 1")
    arr = np.asarray(volume)
    h, w = arr.shape[-2:]
    ys, xs = _corner_coords(height, h), _corner_coords(width, w)
    if interp == "nearest":
        yi = np.floor(ys + 0.5).astype(int)
        xi = np.floor(xs + 0.5).astype(int)
        return arr[..., yi, :][..., xi]
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    fy = (ys - y0)[:, None]
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = xs - x0
    rows = arr[..., y0, :] * (1 - fy) + arr[..., y1, :] * fy
    return rows[..., x0] * (1 - fx) + rows[..., x1] * fx


def synthesize(
    volume: Volume,
    annotation: SliceAnnotation,
    config: NfcConfig = NfcConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[Volume, LabelVolume]:
    """Build a synthetic (image, label) volume from the annotated slice only."""
    annotation.check_against(volume)
    plane = extract_slice(volume, annotation.slice_index)
    h, w = plane.shape[-2:]
    k = config.window_size(h, w)
    img_seq = divide(plane, k, config.stride)
    lbl_seq = divide(annotation.label2d, k, config.stride)
    if rng is None:
        rng = np.random.default_rng(0)
    img_vol, lbl_vol = stack(
        img_seq,
        lbl_seq,
        config.stack_strategy,
        rng,
        config.noise_insert_prob,
        (float(plane.mean()), float(plane.std())),
    )
    img_out = resize(img_vol, h, w, config.image_interp)
    lbl_out = resize(lbl_vol, h, w, config.label_interp)
    return (
        Volume(np.clip(img_out, 0.0, 1.0)),
        LabelVolume(lbl_out.astype(annotation.label2d.dtype, copy=False), annotation.num_classes),
    )
