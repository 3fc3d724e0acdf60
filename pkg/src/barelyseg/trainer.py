"""Mean-teacher training loop for barely-supervised segmentation.

Every iteration draws its randomness from a generator seeded by
``(seed, iteration)``, so the data side of an iteration (crops, synthesis,
frequency and spatial mixing) is a pure function of its inputs and can be
prepared ahead of time on worker threads without changing results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fsx, nfc, segnet
from .objectives import LossReport, dsc_metric, supervised_loss, unsupervised_loss
from .segnet import ParameterSet, SegNetConfig
from .tensorcore import Tape
from .voxel import BarelyLabeledSet, LabelVolume, SliceAnnotation, UnlabeledSet, Volume

log = logging.getLogger(__name__)

VARIANTS = {
    # name: (nfc, fx, sx)
    "baseline_mt": (False, False, False),
    "nfc": (True, False, False),
    "nfc_fx": (True, True, False),
    "nfc_sx": (True, False, True),
    "full_bva": (True, True, True),
}


class NumericalFailure(RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-4
    epochs: int = 40
    ema_decay: float = 0.99
    crop: tuple[int, int, int] = (32, 64, 64)
    nfc: nfc.NfcConfig = field(default_factory=nfc.NfcConfig)
    fsx: fsx.FsxConfig = field(default_factory=fsx.FsxConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    variant: str = "full_bva"
    mt_noise_std: float = 0.05
    unsup_warmup: int = 0  # iterations trained without the consistency term
    iterations_per_epoch: int | None = None
    val_every: int = 1
    data_workers: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.unsup_warmup < 0:
            raise ValueError("unsup_warmup must be >= 0")
        if len(self.crop) != 3 or any(c % self.segnet.factor for c in self.crop):
            raise ValueError(f"crop {self.crop} must be 3 dims divisible by {self.segnet.factor}")

    @property
    def components(self) -> tuple[bool, bool, bool]:
        return VARIANTS[self.variant]


@dataclass
class TrainState:
    student: ParameterSet
    teacher: ParameterSet
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0
    last_trace: dict | None = None


def init_state(config: TrainerConfig) -> TrainState:
    rng = np.random.default_rng([config.seed, 0x5EED])
    student = segnet.init(config.segnet, rng, np.dtype(config.dtype))
    return TrainState(
        student=student,
        teacher={k: v.copy() for k, v in student.items()},
        m={k: np.zeros_like(v) for k, v in student.items()},
        v={k: np.zeros_like(v) for k, v in student.items()},
        seed=config.seed,
    )


# ------------------------------------------------------------------ EMA / optimizer


def ema_update(teacher: ParameterSet, student: ParameterSet, decay: float) -> ParameterSet:
    """In place: ``teacher <- decay * teacher + (1 - decay) * student``."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        t *= decay
        t += (1 - decay) * s
    return teacher


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], config: TrainerConfig) -> None:
    """Adam moments with decoupled weight decay, applied to the student only."""
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    lr = config.lr
    for name, p in state.student.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p *= 1 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# ------------------------------------------------------------------ cropping


def _pad_to(arr: np.ndarray, dims) -> tuple[np.ndarray, tuple[int, ...]]:
    """Zero-pad the trailing three axes symmetrically up to ``dims``."""
    spatial = arr.shape[-3:]
    extra = [max(0, d - n) for d, n in zip(dims, spatial)]
    if not any(extra):
        return arr, (0, 0, 0)
    before = tuple(e // 2 for e in extra)
    widths = [(0, 0)] * (arr.ndim - 3) + [(b, e - b) for b, e in zip(before, extra)]
    return np.pad(arr, widths), before


def random_crop(volume: np.ndarray, label: np.ndarray | None, crop, rng: np.random.Generator, include_depth: int | None = None):
    """Crop ``(C, D, H, W)`` (and an aligned ``(D, H, W)`` label) to ``crop``.

    Smaller volumes are zero-padded first. ``include_depth`` constrains the
    window so that depth index (in unpadded coordinates) stays inside it.
    Returns ``(image, label, corner)`` with ``corner`` in padded coordinates.
    """
    vol, before = _pad_to(np.asarray(volume), crop)
    lab = _pad_to(np.asarray(label), crop)[0] if label is not None else None
    corner = []
    for axis, (n, c) in enumerate(zip(vol.shape[-3:], crop)):
        lo, hi = 0, n - c
        if axis == 0 and include_depth is not None:
            k = include_depth + before[0]
            lo, hi = max(lo, k - c + 1), min(hi, k)
        corner.append(int(rng.integers(lo, hi + 1)))
    sl = tuple(slice(o, o + c) for o, c in zip(corner, crop))
    img = vol[(Ellipsis,) + sl]
    return img, (lab[sl] if lab is not None else None), tuple(corner), before


def crop_annotated(volume: Volume, annotation: SliceAnnotation, crop, rng):
    """Crop a barely-labeled volume; the annotated plane is kept inside the crop."""
    img, _, corner, before = random_crop(volume.data, None, crop, rng, include_depth=annotation.slice_index)
    plane, _ = _pad_to(annotation.label2d[None, None], (1,) + tuple(crop[1:]))
    plane = plane[0, 0]
    plane = plane[corner[1] : corner[1] + crop[1], corner[2] : corner[2] + crop[2]]
    k = annotation.slice_index + before[0] - corner[0]
    return img, SliceAnnotation(k, plane, annotation.num_classes)


# ------------------------------------------------------------------ one iteration


@dataclass
class Batch:
    """Everything an iteration needs that does not depend on model weights."""

    seed: tuple[int, int]
    x_l: np.ndarray
    ann: SliceAnnotation
    x_u: np.ndarray
    x_v: np.ndarray | None = None
    y_v: np.ndarray | None = None
    x_mixed: np.ndarray | None = None
    alpha: float | None = None
    mask: np.ndarray | None = None


def prepare_batch(
    seed: tuple[int, int],
    labeled_item: tuple[Volume, SliceAnnotation],
    unlabeled_item: Volume,
    config: TrainerConfig,
) -> Batch:
    rng = np.random.default_rng(list(seed))
    use_nfc, use_fx, use_sx = config.components
    dtype = np.dtype(config.dtype)
    vol_l, ann = labeled_item
    x_l, ann_c = crop_annotated(vol_l, ann, config.crop, rng)
    x_u, _, _, _ = random_crop(unlabeled_item.data, None, config.crop, rng)
    batch = Batch(seed, x_l.astype(dtype), ann_c, x_u.astype(dtype))
    if not use_nfc:
        noise = rng.normal(0.0, config.mt_noise_std, size=x_u.shape)
        batch.x_mixed = np.clip(x_u + noise, 0.0, 1.0).astype(dtype)
        return batch
    x_syn, y_syn = nfc.synthesize(vol_l, ann, config.nfc, rng)
    x_v, y_v, _, _ = random_crop(x_syn.data, y_syn.data, config.crop, rng)
    batch.x_v, batch.y_v = x_v.astype(dtype), y_v
    xt_u, xt_v = x_u, x_v
    if use_fx:
        batch.alpha = config.fsx.sample_alpha(rng)
        omega = fsx.center_mask(config.crop, config.fsx.beta)
        xt_v, xt_u = fsx.frequency_mixup(x_u, x_v, batch.alpha, omega, config.fsx.blend_mode)
    if use_sx:
        batch.mask = fsx.random_cuboid_mask(config.crop, config.fsx.cutmix_ratio_range, rng).mask
        mixed = fsx.spatial_mixup(xt_u, xt_v, batch.mask)
    elif use_fx:
        mixed = xt_u
    else:
        mixed = np.clip(x_u + rng.normal(0.0, config.mt_noise_std, size=x_u.shape), 0.0, 1.0)
    batch.x_mixed = mixed.astype(dtype)
    return batch


def pseudo_label(teacher: ParameterSet, batch: Batch, config: TrainerConfig):
    """Teacher predictions (no tape) mixed with the batch mask, then hardened."""
    probs_u = segnet.forward(teacher, batch.x_u, config.segnet)
    if batch.mask is None:
        return fsx.harden(probs_u), None
    probs_v = segnet.forward(teacher, batch.x_v, config.segnet)
    label_mask = batch.mask
    return fsx.harden(fsx.spatial_mixup(probs_u, probs_v, label_mask)), label_mask


def student_loss(params: ParameterSet, batch: Batch, target: np.ndarray | None, config: TrainerConfig, tape: Tape | None = None):
    """Build the full loss on ``tape``; returns ``(tape, total node, LossReport)``.

    ``target=None`` leaves out the consistency term (warm-up iterations).
    """
    tape = tape or Tape()
    cfg = config.segnet
    pred_l = segnet.forward(params, batch.x_l, cfg, tape)
    pred_v = segnet.forward(params, batch.x_v, cfg, tape) if batch.x_v is not None else None
    sup, s_slice, s_synth = supervised_loss(tape, pred_l, batch.ann, pred_v, batch.y_v)
    total, l_unsup = sup, 0.0
    if target is not None:
        pred_m = segnet.forward(params, batch.x_mixed, cfg, tape)
        unsup = unsupervised_loss(tape, pred_m, target)
        total, l_unsup = tape.add(sup, unsup), float(tape.value(unsup))
    report = LossReport(
        float(tape.value(s_slice)),
        float(tape.value(s_synth)) if s_synth is not None else 0.0,
        l_unsup,
    )
    return tape, total, report


def train_iteration(
    state: TrainState,
    labeled_item: tuple[Volume, SliceAnnotation],
    unlabeled_item: Volume,
    config: TrainerConfig,
    batch: Batch | None = None,
) -> LossReport:
    """One optimizer step on the student followed by one EMA step on the teacher."""
    if batch is None:
        batch = prepare_batch((state.seed, state.step), labeled_item, unlabeled_item, config)
    try:
        if state.step < config.unsup_warmup:
            target, label_mask = None, None
        else:
            target, label_mask = pseudo_label(state.teacher, batch, config)
        tape, total, report = student_loss(state.student, batch, target, config)
        grads = tape.backward(total)
    except FloatingPointError as exc:
        raise NumericalFailure(state.step, str(exc)) from exc
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalFailure(state.step, "non-finite gradient")
    adamw_step(state, grads, config)
    ema_update(state.teacher, state.student, config.ema_decay)
    state.step += 1
    state.last_trace = {"seed": batch.seed, "image_mask": batch.mask, "label_mask": label_mask, "alpha": batch.alpha}
    return report


# ------------------------------------------------------------------ fit / evaluate


def evaluate_dsc(params: ParameterSet, volumes, labels, config: SegNetConfig) -> float:
    scores = []
    for vol, lab in zip(volumes, labels):
        pred = segnet.predict(params, vol.data.astype(params["head.w"].dtype), config)
        scores.append(dsc_metric(pred, lab.data, config.num_classes)[1])
    return float(np.mean(scores))


def schedule(config: TrainerConfig, n_labeled: int, n_unlabeled: int, epoch: int):
    """(labeled index, unlabeled index) pairs for one epoch."""
    rng = np.random.default_rng([config.seed, 0xE90C, epoch])
    per_epoch = config.iterations_per_epoch or n_unlabeled
    order = np.concatenate([rng.permutation(n_unlabeled) for _ in range(-(-per_epoch // n_unlabeled))])[:per_epoch]
    picks = rng.integers(0, n_labeled, size=per_epoch)
    return list(zip(picks.tolist(), order.tolist()))


def train(
    config: TrainerConfig,
    labeled: BarelyLabeledSet,
    unlabeled: UnlabeledSet,
    val: tuple[list[Volume], list[LabelVolume]] | None = None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    if len(labeled) == 0 or len(unlabeled) == 0:
        raise ValueError("training needs at least one labeled and one unlabeled volume")
    state = state or init_state(config)
    history = []
    pool = ThreadPoolExecutor(config.data_workers) if config.data_workers > 0 else None
    try:
        for epoch in range(config.epochs):
            plan = schedule(config, len(labeled), len(unlabeled), epoch)
            jobs = [
                ((state.seed, state.step + i), labeled.items[li], unlabeled.volumes[ui])
                for i, (li, ui) in enumerate(plan)
            ]
            if pool is not None:
                batches = pool.map(lambda j: prepare_batch(*j, config), jobs)
            else:
                batches = (prepare_batch(*j, config) for j in jobs)
            reports = []
            for (seed, item_l, item_u), batch in zip(jobs, batches):
                reports.append(train_iteration(state, item_l, item_u, config, batch))
            row = {"epoch": epoch + 1}
            for key in ("l_total", "l_sup_slice", "l_sup_synth", "l_unsup"):
                row[key] = float(np.mean([r.as_row()[key] for r in reports]))
            row["val_dsc"] = None
            if val is not None and val[0] and ((epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs):
                row["val_dsc"] = evaluate_dsc(state.student, val[0], val[1], config.segnet)
            log.info("epoch %d %s", epoch + 1, row)
            history.append(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return state, history


def fit(config: TrainerConfig, labeled: BarelyLabeledSet, unlabeled: UnlabeledSet, val=None):
    """Train and return ``(student parameters, per-epoch log)``."""
    state, history = train(config, labeled, unlabeled, val)
    return state.student, history
