"""``barelyseg`` command line: synth, train, eval, ablate, preview-nfc, preview-fsx.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
Config files are INI with sections ``trainer``, ``nfc``, ``fsx``, ``segnet``
and ``phantom``; values are Python literals (``lr = 0.005``,
``crop = (16, 32, 32)``, ``variant = full_bva``). Unknown sections or keys are
rejected. Every command that writes a directory also writes
``resolved_config.ini`` there.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import fsx, nfc, segnet
from .experiments import GRIDS, LEAK_RECORD, ExperimentSpec, checkpoint_records, desk_trainer, run_experiment, to_csv
from .objectives import metric_rows
from .phantom import SLICE_POLICIES, DatasetManifest, PhantomConfig, build_split, check_manifest, generate_phantom, pick_slice
from .trainer import VARIANTS, NumericalFailure, TrainerConfig, random_crop, train
from .volume_io import VolumeFileError, load_records, load_volume, save_records, save_volume
from .voxel import LabelVolume, SliceAnnotation, Volume, annotate, make_training_sets

log = logging.getLogger("barelyseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "BARELYSEG_DATA"
MANIFEST = "manifest.json"
RESOLVED = "resolved_config.ini"

SECTIONS = {
    "trainer": TrainerConfig,
    "nfc": nfc.NfcConfig,
    "fsx": fsx.FsxConfig,
    "segnet": segnet.SegNetConfig,
    "phantom": PhantomConfig,
}
NESTED = {"nfc", "fsx", "segnet"}  # sub-configs of the trainer section
# keys whose default type does not cover every legal value
ALT_TYPES = {("nfc", "window"): (int, float), ("trainer", "iterations_per_epoch"): (int, type(None))}


class ConfigError(Exception):
    pass


class DataError(Exception):
    """Missing or malformed files (exit 3)."""


# ------------------------------------------------------------------ config files


def _coerce(section: str, key: str, raw: str, default):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        value = raw.strip()
    if isinstance(value, list):
        value = tuple(value)
    allowed = ALT_TYPES.get((section, key))
    if allowed is None:
        allowed = (int, float) if isinstance(default, float) else (type(default),)
    if isinstance(value, bool) != isinstance(default, bool) or not isinstance(value, allowed):
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {' or '.join(t.__name__ for t in allowed)}")
    if isinstance(default, float) and isinstance(value, int) and (section, key) not in ALT_TYPES:
        value = float(value)
    if isinstance(default, tuple) and len(value) != len(default):
        raise ConfigError(f"[{section}] {key} needs {len(default)} entries, got {len(value)}")
    return value


def _fields(section: str) -> dict:
    cls = SECTIONS[section]
    out = {}
    for f in dataclasses.fields(cls):
        if section == "trainer" and f.name in NESTED:
            continue
        out[f.name] = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return out


def read_config(path, sections=tuple(SECTIONS)) -> dict[str, dict]:
    """Parse an INI file into ``{section: {key: value}}`` of overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"{path}: unknown section [{section}]; allowed: {', '.join(sections)}")
        defaults = _fields(section)
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out[section][key] = _coerce(section, key, raw, defaults[key])
    return out


def _build(cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def trainer_config(overrides: dict[str, dict], base: TrainerConfig | None = None, **top) -> TrainerConfig:
    base = base or TrainerConfig()
    nested = {name: _build(type(getattr(base, name)), {**dataclasses.asdict(getattr(base, name)), **overrides.get(name, {})}) for name in NESTED}
    values = {k: getattr(base, k) for k in _fields("trainer")}
    values.update(overrides.get("trainer", {}))
    values.update({k: v for k, v in top.items() if v is not None})
    return _build(TrainerConfig, {**values, **nested})


def phantom_config(overrides: dict[str, dict]) -> PhantomConfig:
    return _build(PhantomConfig, overrides.get("phantom", {}))


def render_config(sections: dict[str, object], extra: dict[str, dict] | None = None) -> str:
    """INI text for dataclass configs (``trainer`` is split into its sub-sections).

    ``extra`` run facts (seeds, paths) go into leading comment lines so the
    file stays loadable as a config.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, cfg in sections.items():
        parser[name] = {f.name: repr(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if not (name == "trainer" and f.name in NESTED)}
        if name == "trainer":
            for sub in sorted(NESTED):
                sub_cfg = getattr(cfg, sub)
                parser[sub] = {f.name: repr(getattr(sub_cfg, f.name)) for f in dataclasses.fields(sub_cfg)}
    buf = io.StringIO()
    for name, values in (extra or {}).items():
        buf.write(f"# {name}: " + ", ".join(f"{k}={v!r}" for k, v in values.items()) + "\n")
    parser.write(buf)
    return buf.getvalue()


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ------------------------------------------------------------------ data directories


def _data_dir(arg: str | None) -> Path:
    value = arg or os.environ.get(DATA_ENV)
    if not value:
        raise ConfigError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(value)


def load_manifest(data: Path) -> DatasetManifest:
    try:
        manifest = DatasetManifest.from_dict(json.loads((data / MANIFEST).read_text()))
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{data / MANIFEST}: malformed manifest ({exc})") from None
    for e in manifest.entries:
        for rel in (e.volume, e.label, e.annotation, e.reference_label):
            if rel is not None and not (data / rel).is_file():
                raise DataError(f"manifest references missing file {rel}")
    return manifest


def _load(path: Path, expect: str):
    try:
        return load_volume(path, expect=expect)
    except (OSError, VolumeFileError) as exc:
        raise DataError(f"{path}: {exc}") from None


def load_training_data(data: Path, manifest: DatasetManifest):
    cache: dict[str, Volume] = {}

    def volume(rel):
        # one object per file, so the labeled/unlabeled pooling sees duplicates
        if rel not in cache:
            cache[rel] = _load(data / rel, "real")
        return cache[rel]

    labeled = []
    for e in manifest.by_split("train_labeled"):
        vol = volume(e.volume)
        plane = _load(data / e.annotation, "class")
        if isinstance(plane, LabelVolume) or np.ndim(plane) != 2:
            raise DataError(f"{e.annotation}: annotation must be a 2D class grid")
        labeled.append((vol, SliceAnnotation(e.slice_index, plane, 2)))
    unlabeled = [volume(e.volume) for e in manifest.by_split("train_unlabeled")]
    val = [(_load(data / e.volume, "real"), _load(data / e.label, "class")) for e in manifest.by_split("val")]
    return labeled, unlabeled, ([v for v, _ in val], [l for _, l in val])


def _fix_num_classes(labeled, num_classes: int):
    return [(v, SliceAnnotation(a.slice_index, a.label2d, num_classes)) for v, a in labeled]


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    overrides = read_config(args.phantom_config, ("phantom",)) if args.phantom_config else {}
    pcfg = phantom_config(overrides)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = Path(args.out or _data_dir(None))
    pairs = [generate_phantom(args.seed * 100_003 + i, pcfg) for i in range(args.n)]
    labels = [lab for _, lab in pairs]
    ids = [f"vol_{i:03d}" for i in range(args.n)]
    try:
        manifest = build_split(labels, args.labeled_fraction, args.slice_policy, args.seed, ids)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    index = {vid: i for i, vid in enumerate(ids)}
    try:
        for d in ("volumes", "labels", "annotations"):
            (out / d).mkdir(parents=True, exist_ok=True)
        for vid, (vol, lab) in zip(ids, pairs):
            save_volume(out / "volumes" / f"{vid}.bvol", vol)
            save_volume(out / "labels" / f"{vid}.bvol", lab, name="label")
        for e in manifest.entries:
            e.volume = f"volumes/{e.volume}.bvol"
            vid = Path(e.volume).stem
            if e.label is not None:
                e.label = f"labels/{vid}.bvol"
            if e.split in ("train_labeled", "train_unlabeled"):
                e.reference_label = f"labels/{vid}.bvol"
            if e.split == "train_labeled":
                e.annotation = f"annotations/{vid}_slice{e.slice_index:03d}.bvol"
                plane = annotate(labels[index[vid]], e.slice_index).label2d
                save_volume(out / e.annotation, plane, name="annotation")
        check_manifest(manifest, {f"volumes/{vid}.bvol": pairs[index[vid]][1].shape[0] for vid in ids})
        _write_text(out / MANIFEST, json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
        run = {"n": args.n, "seed": args.seed, "labeled_fraction": args.labeled_fraction, "slice_policy": args.slice_policy}
        _write_text(out / RESOLVED, render_config({"phantom": pcfg}, {"synth": run}))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    counts = {s: len(manifest.by_split(s)) for s in ("train_labeled", "train_unlabeled", "val", "test")}
    print(f"wrote {args.n} phantoms to {out} {counts}")
    return EXIT_OK


LOG_COLUMNS = ("epoch", "l_total", "l_sup_slice", "l_sup_synth", "l_unsup", "val_dsc")


def _log_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in history:
        writer.writerow(["" if row[c] is None else (f"{row[c]:.8g}" if isinstance(row[c], float) else row[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def cmd_train(args) -> int:
    overrides = read_config(args.config, ("trainer", "nfc", "fsx", "segnet")) if args.config else {}
    config = trainer_config(overrides, variant=args.variant, seed=args.seed, data_workers=args.workers)
    data = _data_dir(args.data)
    manifest = load_manifest(data)
    labeled, unlabeled, val = load_training_data(data, manifest)
    if not labeled or not unlabeled:
        raise ConfigError("manifest has no train_labeled or no train_unlabeled entries")
    lset, uset = make_training_sets(_fix_num_classes(labeled, config.segnet.num_classes), unlabeled)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / RESOLVED, render_config({"trainer": config}, {"run": {"data": str(data)}}))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    state, history = train(config, lset, uset, val if val[0] else None)
    records = checkpoint_records(state.student, config.segnet)
    records.update({f"teacher/{k}": v for k, v in state.teacher.items()})
    try:
        save_records(out / "checkpoint.bvol", records)
        _write_text(out / "train_log.csv", _log_csv(history))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"trained {config.variant} for {config.epochs} epochs; checkpoint at {out / 'checkpoint.bvol'}")
    return EXIT_OK


def load_student(path) -> tuple[segnet.ParameterSet, segnet.SegNetConfig]:
    """Student parameters of a checkpoint; teacher records are never read into the model."""
    try:
        records = load_records(path)
    except (OSError, VolumeFileError) as exc:
        raise DataError(f"{path}: {exc}") from None
    params = {k[len("student/") :]: v for k, v in records.items() if k.startswith("student/")}
    leak = float(records[LEAK_RECORD].reshape(-1)[0]) if LEAK_RECORD in records else 0.0
    try:
        return params, segnet.config_from_params(params, leak)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc.args[0]}") from None


EVAL_SPLITS = ("test", "val", "train_labeled", "train_unlabeled")


def eval_rows(params, cfg: segnet.SegNetConfig, data: Path, manifest: DatasetManifest, split: str) -> list[dict]:
    entries = manifest.by_split(split)
    if split.startswith("train"):
        entries = list({e.volume: e for e in entries}.values())
    if not entries:
        raise ConfigError(f"split {split!r} is empty")
    rows = []
    for e in entries:
        ref = e.label or e.reference_label
        if ref is None:
            raise DataError(f"{e.volume}: no label volume to evaluate against")
        vol, lab = _load(data / e.volume, "real"), _load(data / ref, "class")
        pred = segnet.predict(params, vol.data.astype(params["head.w"].dtype), cfg)
        rows += metric_rows(Path(e.volume).stem, pred, lab.data, cfg.num_classes)
    return rows


def eval_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["volume_id", "class", "dsc", "asd"])
    for r in rows:
        writer.writerow([r["volume_id"], r["class"], f"{r['dsc']:.6f}", "undefined" if r["asd"] is None else f"{r['asd']:.6f}"])
    asds = [r["asd"] for r in rows if r["asd"] is not None]
    by_volume: dict[str, list[float]] = {}
    for r in rows:
        by_volume.setdefault(r["volume_id"], []).append(r["dsc"])
    mean_dsc = float(np.mean([np.mean(v) for v in by_volume.values()]))
    writer.writerow(["mean", "all", f"{mean_dsc:.6f}", f"{np.mean(asds):.6f}" if asds else "undefined"])
    return buf.getvalue()


def cmd_eval(args) -> int:
    data = _data_dir(args.data)
    manifest = load_manifest(data)
    params, cfg = load_student(args.checkpoint)
    text = eval_csv(eval_rows(params, cfg, data, manifest, args.split))
    sys.stdout.write(text)
    if args.out:
        try:
            _write_text(Path(args.out) / f"eval_{args.split}.csv", text)
        except OSError as exc:
            raise DataError(f"cannot write to {args.out}: {exc}") from None
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = read_config(args.config, ("trainer", "nfc", "fsx", "segnet", "phantom")) if args.config else {}
    trainer = trainer_config(overrides, base=desk_trainer(), data_workers=args.workers)
    phantom = _build(PhantomConfig, {**dataclasses.asdict(ExperimentSpec.phantom), **overrides.get("phantom", {})})
    spec = ExperimentSpec(args.grid, tuple(args.seeds), data_seed=args.data_seed, phantom=phantom, trainer=trainer, jobs=args.jobs)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        run = {"grid": args.grid, "seeds": tuple(args.seeds), "data_seed": args.data_seed, "n_volumes": spec.n_volumes, "labeled_fraction": spec.labeled_fraction}
        _write_text(out / RESOLVED, render_config({"trainer": trainer, "phantom": phantom}, {"experiment": run}))
        rows = run_experiment(spec, str(out))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    sys.stdout.write(to_csv(rows))
    return EXIT_OK


def _preview_inputs(args):
    vol = _load(Path(args.input), "real")
    if not isinstance(vol, Volume):
        raise DataError(f"{args.input}: expected a 3D or 4D volume")
    if args.label is None:
        raise ConfigError("--label is required (a 3D label volume or a 2D slice annotation)")
    lab = _load(Path(args.label), "class")
    if isinstance(lab, LabelVolume):
        k = args.slice if args.slice is not None else pick_slice(lab, "max_foreground_area")
        try:
            ann = annotate(lab, k)
        except IndexError as exc:
            raise ConfigError(str(exc)) from None
    else:
        if args.slice is None:
            raise ConfigError("--slice is required with a 2D annotation")
        ann = SliceAnnotation(args.slice, lab, max(2, int(lab.max()) + 1))
    try:
        ann.check_against(vol)
    except (IndexError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return vol, ann


def cmd_preview_nfc(args) -> int:
    overrides = read_config(args.config, ("nfc",)) if args.config else {}
    cfg = _build(nfc.NfcConfig, overrides.get("nfc", {}))
    vol, ann = _preview_inputs(args)
    try:
        img, lab = nfc.synthesize(vol, ann, cfg, np.random.default_rng(args.seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_volume(out / "nfc_image.bvol", img)
        save_volume(out / "nfc_label.bvol", lab, name="label")
        _write_text(out / RESOLVED, render_config({"nfc": cfg}, {"preview": {"seed": args.seed, "slice": ann.slice_index}}))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"synthesized depth {img.depth} from slice {ann.slice_index}")
    return EXIT_OK


def cmd_preview_fsx(args) -> int:
    overrides = read_config(args.config, ("nfc", "fsx")) if args.config else {}
    ncfg = _build(nfc.NfcConfig, overrides.get("nfc", {}))
    fvals = overrides.get("fsx", {})
    if args.beta is not None:
        fvals = {**fvals, "beta": args.beta}
    fcfg = _build(fsx.FsxConfig, fvals)
    vol, ann = _preview_inputs(args)
    x_u = vol.data if args.unlabeled is None else _load(Path(args.unlabeled), "real").data
    rng = np.random.default_rng(args.seed)
    syn_img, syn_lab = nfc.synthesize(vol, ann, ncfg, rng)
    shape = x_u.shape[-3:]
    x_v, y_v, _, _ = random_crop(syn_img.data, syn_lab.data, shape, rng)
    alpha = fcfg.sample_alpha(rng) if args.alpha is None else args.alpha
    if not 0 <= alpha <= 1:
        raise ConfigError("--alpha must lie in [0, 1]")
    omega = fsx.center_mask(shape, fcfg.beta)
    xt_v, xt_u = fsx.frequency_mixup(x_u, x_v, alpha, omega, fcfg.blend_mode)
    cut = fsx.random_cuboid_mask(shape, fcfg.cutmix_ratio_range, rng)
    mixed = fsx.spatial_mixup(xt_u, xt_v, cut.mask)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_volume(out / "synth_image.bvol", Volume(x_v))
        save_volume(out / "synth_label.bvol", LabelVolume(y_v, syn_lab.num_classes), name="label")
        save_volume(out / "fx_synth.bvol", Volume(xt_v))
        save_volume(out / "fx_unlabeled.bvol", Volume(xt_u))
        save_volume(out / "mixed.bvol", Volume(mixed))
        save_volume(out / "freq_mask.bvol", omega.astype(np.uint8), name="omega")
        save_volume(out / "spatial_mask.bvol", cut.mask.astype(np.uint8), name="cutmix")
        run = {"seed": args.seed, "slice": ann.slice_index, "alpha": alpha}
        _write_text(out / RESOLVED, render_config({"nfc": ncfg, "fsx": fcfg}, {"preview": run}))
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"alpha {alpha:.4f}; cutmix corner {cut.corner} sides {cut.sides}")
    return EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="barelyseg", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a phantom dataset and manifest")
    s.add_argument("--out", help=f"output directory (default ${DATA_ENV})")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--phantom-config")
    s.add_argument("--labeled-fraction", type=float, default=0.05)
    s.add_argument("--slice-policy", choices=[c for c in SLICE_POLICIES if c != "fixed"], default="max_foreground_area")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one variant on a synthesized dataset")
    t.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    t.add_argument("--config")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int, help="data preparation threads")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint's student on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")
    e.add_argument("--split", choices=EVAL_SPLITS, default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an experiment grid on the desk phantom set")
    a.add_argument("--grid", choices=GRIDS, required=True)
    a.add_argument("--seeds", type=int, nargs="+", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--workers", type=int, default=0, help="data preparation threads per run")
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    for name, func in (("preview-nfc", cmd_preview_nfc), ("preview-fsx", cmd_preview_fsx)):
        v = sub.add_parser(name, help=f"write {name[8:].upper()} outputs for inspection")
        v.add_argument("--in", dest="input", required=True, help="image volume")
        v.add_argument("--label", help="3D label volume or 2D slice annotation")
        v.add_argument("--slice", type=int, help="annotated slice (default: largest foreground area)")
        v.add_argument("--seed", type=int, default=0)
        v.add_argument("--config")
        v.add_argument("--out", required=True)
        if name == "preview-fsx":
            v.add_argument("--unlabeled", help="volume whose style is mixed in (default: --in)")
            v.add_argument("--alpha", type=float, help="force the amplitude mixing weight")
            v.add_argument("--beta", type=float, help="frequency mask size")
        v.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalFailure as exc:
        print(f"numerical failure at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
