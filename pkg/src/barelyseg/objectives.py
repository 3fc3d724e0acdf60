"""Dice loss on the tape, the barely-supervised loss terms, and DSC/ASD metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensorcore import Tape
from .voxel import SliceAnnotation

DICE_EPS = 1e-5


def one_hot(classes: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    classes = np.asarray(classes)
    return (np.arange(num_classes).reshape((-1,) + (1,) * classes.ndim) == classes[None]).astype(dtype)


def _as_target(target, num_classes: int, dtype) -> np.ndarray:
    t = np.asarray(target)
    if np.issubdtype(t.dtype, np.integer) or t.dtype == bool:
        return one_hot(t, num_classes, dtype)
    return t.astype(dtype, copy=False)


def dice_loss(pred, target, tape: Tape | None = None):
    """Soft Dice loss averaged over all classes (background included).

    Per class ``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``. ``target`` is
    either an integer class grid or a probability map shaped like ``pred``.
    With a tape, ``pred`` is a node id and a scalar node id is returned;
    otherwise ``pred`` is an array and a float is returned.
    """
    own = tape is None
    t = Tape(record=False) if own else tape
    p = t.constant(pred) if own else pred
    pv = t.value(p)
    tgt = _as_target(target, pv.shape[0], pv.dtype)
    if tgt.shape != pv.shape:
        raise ValueError(f"prediction shape {pv.shape} does not match target shape {tgt.shape}")
    spatial = tuple(range(1, pv.ndim))
    inter = t.sum(t.mul(p, t.constant(tgt)), axes=spatial)
    denom = t.add(t.sum(p, axes=spatial), t.constant((tgt.sum(axis=spatial) + DICE_EPS).astype(pv.dtype)))
    ratio = t.div(t.affine(inter, 2.0, DICE_EPS), denom)
    loss = t.affine(t.mean(ratio), -1.0, 1.0)
    return float(t.value(loss)) if own else loss


@dataclass(frozen=True)
class LossReport:
    l_sup_slice: float
    l_sup_synth: float
    l_unsup: float

    @property
    def l_total(self) -> float:
        return self.l_sup_slice + self.l_sup_synth + self.l_unsup

    def as_row(self) -> dict[str, float]:
        return {
            "l_total": self.l_total,
            "l_sup_slice": self.l_sup_slice,
            "l_sup_synth": self.l_sup_synth,
            "l_unsup": self.l_unsup,
        }


def slice_loss(tape: Tape, pred_l: int, annotation: SliceAnnotation) -> int:
    """Dice on the annotated depth plane only; other planes get zero gradient."""
    plane = tape.take(pred_l, axis=1, index=annotation.slice_index)
    return dice_loss(plane, annotation.label2d, tape)


def supervised_loss(tape: Tape, pred_l: int, annotation: SliceAnnotation, pred_v: int | None, y_v) -> tuple[int, int, int | None]:
    """(sum, slice term, synthetic-volume term). Without ``pred_v`` the sum is the slice term."""
    s = slice_loss(tape, pred_l, annotation)
    if pred_v is None:
        return s, s, None
    v = dice_loss(pred_v, y_v, tape)
    return tape.add(s, v), s, v


def unsupervised_loss(tape: Tape, pred_mixed: int, pseudo_label) -> int:
    """Consistency Dice against a hard pseudo-label (a constant on the tape)."""
    return dice_loss(pred_mixed, np.asarray(pseudo_label), tape)


# ---------------------------------------------------------------- metrics


def dsc_metric(pred, target, num_classes: int) -> tuple[dict[int, float], float]:
    """Per-foreground-class DSC and their mean. Both-empty classes score 1."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    scores = {}
    for c in range(1, num_classes):
        a, b = pred == c, target == c
        na, nb = int(a.sum()), int(b.sum())
        scores[c] = 1.0 if na + nb == 0 else 2.0 * int((a & b).sum()) / (na + nb)
    return scores, float(np.mean(list(scores.values())))


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a background 6-neighbour (outside counts)."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=_SIX, border_value=0)
    return np.argwhere(mask & ~inner)


def asd_metric(pred, target, label: int = 1) -> float | None:
    """Symmetric average surface distance in voxels, ``None`` if either side is empty.

    Every surface voxel of both masks contributes its distance to the nearest
    surface voxel of the other mask; the result is the mean over all of them.
    """
    a = surface_voxels(np.asarray(pred) == label)
    b = surface_voxels(np.asarray(target) == label)
    if len(a) == 0 or len(b) == 0:
        return None
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float((da.sum() + db.sum()) / (len(a) + len(b)))


def metric_rows(volume_id: str, pred, target, num_classes: int) -> list[dict]:
    scores, _ = dsc_metric(pred, target, num_classes)
    return [
        {"volume_id": volume_id, "class": c, "dsc": scores[c], "asd": asd_metric(pred, target, c)}
        for c in range(1, num_classes)
    ]
