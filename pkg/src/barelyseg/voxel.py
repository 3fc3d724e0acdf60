"""Volumes, label volumes and barely-annotated datasets.

Intensity volumes are ``(C, D, H, W)`` float arrays; label volumes are
``(D, H, W)`` integer class grids. A barely-labeled sample carries the label of
exactly one depth slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def normalize(volume: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]. A constant input maps to all zeros."""
    arr = np.asarray(volume, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot normalize an empty volume")
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume contains NaN or Inf")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ValueError(f"volume must be (C, D, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_raw(cls, raw) -> "Volume":
        """Build a volume from arbitrary intensities, normalizing per channel."""
        arr = np.asarray(raw, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        return cls(np.stack([normalize(c) for c in arr]))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def depth(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    data: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"label volume must be (D, H, W), got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"label volume needs an integer dtype, got {arr.dtype}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SliceAnnotation:
    slice_index: int
    label2d: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        arr = np.asarray(self.label2d)
        if arr.ndim != 2:
            raise ValueError(f"slice label must be 2D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise ValueError(f"slice labels outside [0, {self.num_classes})")
        arr.setflags(write=False)
        object.__setattr__(self, "label2d", arr)

    def check_against(self, volume: Volume) -> None:
        d, h, w = volume.spatial_shape
        if not 0 <= self.slice_index < d:
            raise IndexError(f"annotated slice {self.slice_index} outside depth {d}")
        if self.label2d.shape != (h, w):
            raise ValueError(f"slice label shape {self.label2d.shape} != volume plane {(h, w)}")


def extract_slice(volume: Volume, k: int) -> np.ndarray:
    """Depth plane ``k`` as a ``(C, H, W)`` array."""
    if not 0 <= k < volume.depth:
        raise IndexError(f"slice index {k} outside [0, {volume.depth})")
    return volume.data[:, k]


def insert_slice(volume: Volume, k: int, plane: np.ndarray) -> Volume:
    if not 0 <= k < volume.depth:
        raise IndexError(f"slice index {k} outside [0, {volume.depth})")
    data = volume.data.copy()
    data[:, k] = plane
    return Volume(data)


def annotate(label: LabelVolume, k: int) -> SliceAnnotation:
    """Keep only the label of depth slice ``k``."""
    if not 0 <= k < label.shape[0]:
        raise IndexError(f"slice index {k} outside [0, {label.shape[0]})")
    return SliceAnnotation(k, label.data[k].copy(), label.num_classes)


@dataclass
class BarelyLabeledSet:
    items: list[tuple[Volume, SliceAnnotation]] = field(default_factory=list)

    def __post_init__(self):
        for vol, ann in self.items:
            ann.check_against(vol)

    def __len__(self):
        return len(self.items)


@dataclass
class UnlabeledSet:
    volumes: list[Volume] = field(default_factory=list)

    def __len__(self):
        return len(self.volumes)


def make_training_sets(
    labeled: list[tuple[Volume, SliceAnnotation]], unlabeled: list[Volume]
) -> tuple[BarelyLabeledSet, UnlabeledSet]:
    """Pool labeled volumes into the unlabeled set (each distinct volume once)."""
    pool = list(unlabeled)
    seen = {id(v) for v in pool}
    for vol, _ in labeled:
        if id(vol) not in seen:
            pool.append(vol)
            seen.add(id(vol))
    return BarelyLabeledSet(list(labeled)), UnlabeledSet(pool)
