"""Seeded phantom experiment grids (component ablation, NFC sweep, stacking, annotation budget)."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import segnet
from .nfc import NfcConfig
from .objectives import metric_rows
from .phantom import PhantomConfig, build_split, generate_phantom
from .trainer import TrainerConfig, train
from .voxel import SliceAnnotation, annotate, make_training_sets
from .volume_io import save_records

log = logging.getLogger(__name__)

GRIDS = ("components", "nfc-sweep", "stacking", "annotation-budget")
SWEEP_WINDOWS = (Fraction(1, 16), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))
SWEEP_STRIDES = (4, 8, 16)
BUDGETS = (1, 2, 4, 8)


@dataclass(frozen=True)
class Cell:
    name: str
    trainer: dict = field(default_factory=dict)
    nfc: dict = field(default_factory=dict)
    labeled_fraction: float | None = None
    multi_slice: int | None = None


def grid_cells(grid: str, n_train: int = 20) -> list[Cell]:
    if grid == "components":
        return [Cell(v, {"variant": v}) for v in ("baseline_mt", "nfc", "nfc_fx", "nfc_sx", "full_bva")]
    if grid == "nfc-sweep":
        return [
            Cell(f"k={k},s={s}", nfc={"window": float(k), "stride": s})
            for k in SWEEP_WINDOWS
            for s in SWEEP_STRIDES
        ]
    if grid == "stacking":
        return [Cell(s, nfc={"stack_strategy": s}) for s in ("sequential", "random", "with_noise")]
    if grid == "annotation-budget":
        cells = []
        for n in BUDGETS:
            cells.append(Cell(f"images={n}", labeled_fraction=n / n_train))
            cells.append(Cell(f"slices={n}", multi_slice=n))
        return cells
    raise ValueError(f"unknown grid {grid!r}; choose from {GRIDS}")


def desk_trainer() -> TrainerConfig:
    """Training settings sized for CPU phantom runs."""
    # Whole-volume crops keep foreground in every batch. The leak keeps the
    # two-channel layers from dying, lr above 2e-3 saturates the softmax into an
    # all-background state, and the warm-up keeps an untrained teacher's
    # targets out of the first two epochs.
    return TrainerConfig(
        lr=2e-3,
        epochs=6,
        crop=(32, 64, 64),
        segnet=segnet.SegNetConfig(base_channels=2, leak=0.1),
        unsup_warmup=40,
        val_every=1000,
    )


@dataclass(frozen=True)
class ExperimentSpec:
    grid: str
    seeds: tuple[int, ...] = (1,)
    data_seed: int = 0
    n_volumes: int = 28
    labeled_fraction: float = 0.05
    phantom: PhantomConfig = PhantomConfig(dims=(32, 64, 64))
    trainer: TrainerConfig = field(default_factory=desk_trainer)
    jobs: int = 1
    cells: tuple[str, ...] | None = None  # restrict to these cell names

    def __post_init__(self):
        if self.grid not in GRIDS:
            raise ValueError(f"unknown grid {self.grid!r}; choose from {GRIDS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")


@lru_cache(maxsize=4)
def _phantoms(data_seed: int, n: int, config: PhantomConfig):
    return [generate_phantom(data_seed * 100_003 + i, config) for i in range(n)]


def build_data(spec: ExperimentSpec, cell: Cell):
    pairs = _phantoms(spec.data_seed, spec.n_volumes, spec.phantom)
    labels = [lab for _, lab in pairs]
    manifest = build_split(
        labels,
        cell.labeled_fraction if cell.labeled_fraction is not None else spec.labeled_fraction,
        seed=spec.data_seed,
        multi_slice=cell.multi_slice,
    )
    index = {f"vol_{i:03d}": i for i in range(len(pairs))}
    labeled = []
    for e in manifest.by_split("train_labeled"):
        vol, lab = pairs[index[e.volume]]
        labeled.append((vol, annotate(lab, e.slice_index)))
    unlabeled = [pairs[index[e.volume]][0] for e in manifest.by_split("train_unlabeled")]
    lset, uset = make_training_sets(labeled, unlabeled)
    val = [pairs[index[e.volume]] for e in manifest.by_split("val")]
    test = [(e.volume, *pairs[index[e.volume]]) for e in manifest.by_split("test")]
    return lset, uset, ([v for v, _ in val], [l for _, l in val]), test


def cell_config(spec: ExperimentSpec, cell: Cell, seed: int) -> TrainerConfig:
    nfc_cfg = replace(spec.trainer.nfc, **cell.nfc)
    return replace(spec.trainer, seed=seed, nfc=nfc_cfg, **cell.trainer)


def evaluate_test(params, config: segnet.SegNetConfig, test) -> list[dict]:
    rows = []
    for vid, vol, lab in test:
        pred = segnet.predict(params, vol.data.astype(params["head.w"].dtype), config)
        rows += metric_rows(vid, pred, lab.data, config.num_classes)
    return rows


LEAK_RECORD = "segnet/leak"


def checkpoint_records(student: segnet.ParameterSet, config: segnet.SegNetConfig) -> dict[str, np.ndarray]:
    """Student records plus the relu leak, which the weight shapes cannot reveal."""
    records = {f"student/{k}": v for k, v in student.items()}
    if config.leak:
        records[LEAK_RECORD] = np.array([config.leak])
    return records


def run_cell(spec: ExperimentSpec, cell: Cell, seed: int, out_dir: str | None = None) -> dict:
    lset, uset, val, test = build_data(spec, cell)
    config = cell_config(spec, cell, seed)
    log.info("cell %s seed %d", cell.name, seed)
    state, history = train(config, lset, uset, val)
    rows = evaluate_test(state.student, config.segnet, test)
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
        safe = cell.name.replace("/", "_").replace("=", "").replace(",", "_")
        save_records(ckpt / f"{safe}_seed{seed}.bvol", checkpoint_records(state.student, config.segnet))
    return summarize_rows(cell.name, seed, rows, config.segnet.num_classes)


def summarize_rows(cell: str, seed, rows: list[dict], num_classes: int) -> dict:
    by_volume: dict[str, list[float]] = {}
    asds = []
    per_class = {c: [] for c in range(1, num_classes)}
    for r in rows:
        by_volume.setdefault(r["volume_id"], []).append(r["dsc"])
        per_class[r["class"]].append(r["dsc"])
        if r["asd"] is not None:
            asds.append(r["asd"])
    out = {
        "grid_cell": cell,
        "seed": seed,
        "mean_dsc": float(np.mean([np.mean(v) for v in by_volume.values()])),
        "mean_asd": float(np.mean(asds)) if asds else None,
    }
    for c, vals in per_class.items():
        out[f"dsc_class{c}"] = float(np.mean(vals))
    return out


def _fmt(v):
    if v is None:
        return "undefined"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def to_csv(rows: list[dict]) -> str:
    cols = ["grid_cell", "seed", "mean_dsc", "mean_asd"]
    extra = sorted({k for r in rows for k in r if k.startswith("dsc_class")})
    cols += extra + ["std_dsc", "std_asd"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) if c in r else "" for c in cols])
    return buf.getvalue()


def _summary(cell: str, rows: list[dict]) -> dict:
    dsc = [r["mean_dsc"] for r in rows]
    asd = [r["mean_asd"] for r in rows if r["mean_asd"] is not None]
    out = {
        "grid_cell": cell,
        "seed": "summary",
        "mean_dsc": float(np.mean(dsc)),
        "mean_asd": float(np.mean(asd)) if asd else None,
        "std_dsc": float(np.std(dsc)),
        "std_asd": float(np.std(asd)) if asd else None,
    }
    for key in sorted(k for k in rows[0] if k.startswith("dsc_class")):
        out[key] = float(np.mean([r[key] for r in rows]))
    return out


def _run_task(args):
    spec, cell, seed, out_dir = args
    return run_cell(spec, cell, seed, out_dir)


def run_experiment(spec: ExperimentSpec, out_dir: str | None = None) -> list[dict]:
    """Train every (cell, seed), evaluate on the test split, return CSV rows.

    Data rows come in (cell, seed) order followed by one summary row per
    cell. With ``out_dir`` the CSV, per-run student checkpoints and plots are
    written there.
    """
    cells = grid_cells(spec.grid)
    if spec.cells is not None:
        cells = [c for c in cells if c.name in spec.cells]
        if not cells:
            raise ValueError(f"no cells named {spec.cells} in grid {spec.grid!r}")
    tasks = [(spec, cell, seed, out_dir) for cell in cells for seed in spec.seeds]
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    rows = list(results)
    for cell in cells:
        rows.append(_summary(cell.name, [r for r in results if r["grid_cell"] == cell.name]))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{spec.grid}.csv").write_text(to_csv(rows))
        plot_rows(spec.grid, rows, out / f"{spec.grid}.png")
    return rows


def plot_rows(grid: str, rows: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = [r for r in rows if r["seed"] == "summary"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if grid == "nfc-sweep":
        by_stride: dict[str, list[tuple[str, float]]] = {}
        for r in summary:
            k, s = r["grid_cell"].split(",")
            by_stride.setdefault(s, []).append((k[2:], r["mean_dsc"]))
        for s, pts in by_stride.items():
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=s)
        ax.set_xlabel("window k (fraction of slice)")
        ax.legend()
    elif grid == "annotation-budget":
        for prefix in ("images", "slices"):
            pts = [(r["grid_cell"].split("=")[1], r["mean_dsc"]) for r in summary if r["grid_cell"].startswith(prefix)]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"multi-{prefix}")
        ax.set_xlabel("labeled slices")
        ax.legend()
    else:
        names = [r["grid_cell"] for r in summary]
        ax.bar(names, [r["mean_dsc"] for r in summary], yerr=[r["std_dsc"] for r in summary], capsize=3)
        ax.tick_params(axis="x", labelrotation=20)
    ax.set_ylabel("mean test DSC")
    ax.set_title(grid)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
