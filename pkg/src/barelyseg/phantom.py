"""Synthetic volumetric phantoms and barely-supervised dataset splits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .voxel import LabelVolume, Volume

SPLITS = ("train_labeled", "train_unlabeled", "val", "test")
SLICE_POLICIES = ("max_foreground_area", "center", "fixed", "random")


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (40, 64, 64)
    n_blobs: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (0.12, 0.3)  # fraction of each axis
    contrast: float = 0.35
    noise_std: float = 0.04
    texture_strength: float = 0.5
    texture_sigma: float = 4.0
    style_jitter: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        lo, hi = self.n_blobs
        if not 1 <= lo <= hi:
            raise ValueError("n_blobs must satisfy 1 <= lo <= hi")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        if self.noise_std < 0 or not 0 <= self.texture_strength <= 1 or not 0 <= self.style_jitter < 1:
            raise ValueError("noise_std >= 0, texture_strength in [0, 1], style_jitter in [0, 1) required")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


FG_FRACTION = (0.01, 0.30)


def _blob_labels(rng, config: PhantomConfig) -> np.ndarray:
    dims = np.array(config.dims)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1).astype(np.float64)
    label = np.zeros(config.dims, dtype=np.uint8)
    for _ in range(int(rng.integers(config.n_blobs[0], config.n_blobs[1] + 1))):
        radii = rng.uniform(*config.radius_range, size=3) * dims
        margin = np.minimum(radii, dims / 2 - 1)
        centre = rng.uniform(margin, dims - 1 - margin)
        rot = Rotation.random(random_state=rng).as_matrix()
        local = (grid - centre) @ rot
        inside = ((local / radii) ** 2).sum(axis=-1) <= 1.0
        label[inside] = int(rng.integers(1, config.num_classes))
    return label


def generate_phantom(seed: int, config: PhantomConfig = PhantomConfig()) -> tuple[Volume, LabelVolume]:
    """Rotated ellipsoids (one class each) on a smooth multiplicative texture.

    Foreground intensity is ``background + contrast * c / (num_classes - 1)``
    before noise, so without noise every foreground voxel is brighter than the
    background would be at that position.
    """
    rng = np.random.default_rng(seed)
    for _ in range(100):
        label = _blob_labels(rng, config)
        frac = float((label > 0).mean())
        if FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            break
    else:
        raise ValueError(f"could not place blobs with foreground fraction in {FG_FRACTION} after 100 attempts")
    field_ = ndimage.gaussian_filter(rng.normal(size=config.dims), config.texture_sigma, mode="wrap")
    span = field_.max() - field_.min()
    field_ = (field_ - field_.min()) / span if span > 0 else np.zeros_like(field_)
    jitter = config.style_jitter
    level = 0.4 * (1 - jitter * rng.uniform())
    gain = config.contrast * (1 - jitter * rng.uniform())
    background = level * (1 - config.texture_strength + config.texture_strength * field_)
    image = background + gain * label / (config.num_classes - 1)
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=config.dims)
    image = np.clip(image, 0.0, 1.0)
    return Volume(image[None]), LabelVolume(label, config.num_classes)


# ------------------------------------------------------------------ splits


@dataclass
class ManifestEntry:
    volume: str
    split: str
    label: str | None = None
    slice_index: int | None = None
    annotation: str | None = None
    reference_label: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "train_labeled" and self.slice_index is None:
            raise ValueError("train_labeled entries need an annotated slice index")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def to_dict(self) -> dict:
        return {"entries": [vars(e).copy() for e in self.entries]}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetManifest":
        return cls([ManifestEntry(**e) for e in data["entries"]])


def split_counts(n: int, ratio=(7, 1, 2)) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` items to train/val/test."""
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    counts = [int(np.floor(x)) for x in exact]
    rema = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in rema[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def pick_slice(label: LabelVolume, policy: str = "max_foreground_area", rng=None, k: int | None = None) -> int:
    depth = label.shape[0]
    if policy == "max_foreground_area":
        return int(np.argmax((label.data > 0).reshape(depth, -1).sum(axis=1)))
    if policy == "center":
        return depth // 2
    if policy == "fixed":
        if k is None or not 0 <= k < depth:
            raise ValueError(f"fixed slice {k} outside [0, {depth})")
        return int(k)
    if policy == "random":
        return int(rng.integers(0, depth))
    raise ValueError(f"unknown slice policy {policy!r}")


def spread_slices(label: LabelVolume, n: int) -> list[int]:
    """``n`` distinct foreground-bearing slices spread evenly over the foreground extent."""
    fg = np.flatnonzero((label.data > 0).reshape(label.shape[0], -1).any(axis=1))
    if len(fg) < n:
        raise ValueError(f"only {len(fg)} slices contain foreground, cannot annotate {n}")
    picks = np.round(np.linspace(0, len(fg) - 1, n + 2)[1:-1]).astype(int) if n > 1 else [len(fg) // 2]
    picks = sorted(set(int(fg[i]) for i in picks))
    extra = [int(s) for s in fg if s not in picks]
    while len(picks) < n:
        picks.append(extra.pop(0))
    return sorted(picks)


def build_split(
    labels: list[LabelVolume],
    labeled_fraction: float,
    slice_policy: str = "max_foreground_area",
    seed: int = 0,
    ids: list[str] | None = None,
    ratio=(7, 1, 2),
    fixed_slice: int | None = None,
    multi_slice: int | None = None,
) -> DatasetManifest:
    """Assign volumes to train/val/test and choose barely-labeled training volumes.

    Every training volume gets a ``train_unlabeled`` entry, labeled ones
    included. ``multi_slice=n`` instead annotates ``n`` slices of a single
    training volume.
    """
    ids = ids or [f"vol_{i:03d}" for i in range(len(labels))]
    rng = np.random.default_rng(seed)
    n_train, n_val, n_test = split_counts(len(labels), ratio)
    order = rng.permutation(len(labels))
    train, val, test = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    if multi_slice is not None:
        n_labeled = 1
    else:
        n_labeled = int(np.floor(labeled_fraction * n_train + 1e-9))
    if n_labeled < 1 or n_train == 0:
        minimum = 1.0 / n_train if n_train else float("inf")
        raise ValueError(f"labeled_fraction {labeled_fraction} selects no volume; minimum is {minimum:.4g}")
    chosen = sorted(rng.choice(train, size=n_labeled, replace=False).tolist())
    entries = []
    for i in chosen:
        if multi_slice is not None:
            ks = spread_slices(labels[i], multi_slice)
        else:
            ks = [pick_slice(labels[i], slice_policy, rng, fixed_slice)]
        for k in ks:
            entries.append(ManifestEntry(ids[i], "train_labeled", slice_index=k))
    entries += [ManifestEntry(ids[i], "train_unlabeled") for i in sorted(train.tolist())]
    entries += [ManifestEntry(ids[i], "val", label=ids[i]) for i in sorted(val.tolist())]
    entries += [ManifestEntry(ids[i], "test", label=ids[i]) for i in sorted(test.tolist())]
    return DatasetManifest(entries)


def check_manifest(manifest: DatasetManifest, depths: dict[str, int] | None = None) -> None:
    """Raise if the manifest breaks the split invariants."""
    train = {e.volume for e in manifest.by_split("train_unlabeled")}
    for e in manifest.by_split("train_labeled"):
        if e.volume not in train:
            raise ValueError(f"labeled volume {e.volume} missing from the unlabeled pool")
        if depths is not None and not 0 <= e.slice_index < depths[e.volume]:
            raise ValueError(f"{e.volume}: annotated slice {e.slice_index} out of range")
    held = [e.volume for e in manifest.entries if e.split in ("val", "test")]
    if len(set(held)) != len(held) or set(held) & train:
        raise ValueError("val/test volumes must be distinct and disjoint from training")
