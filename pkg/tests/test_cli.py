import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from barelyseg.cli import load_student, main, read_config
from barelyseg.nfc import patch_count
from barelyseg.phantom import DatasetManifest, check_manifest
from barelyseg.volume_io import load_records, load_volume, save_records

PHANTOM_INI = "[phantom]\ndims = (10, 20, 20)\n"
TRAIN_INI = """[trainer]
epochs = 1
crop = (8, 16, 16)
lr = 0.005

[segnet]
base_channels = 2
leak = 0.1
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = write(root / "ph.ini", PHANTOM_INI)
    assert main(["synth", "--out", str(root / "data"), "--n", "5", "--seed", "1", "--phantom-config", ini, "--labeled-fraction", "0.3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    cfg = write(dataset / "train.ini", TRAIN_INI)
    out = dataset / "run"
    assert main(["train", "--data", str(dataset / "data"), "--config", cfg, "--variant", "full_bva", "--out", str(out)]) == 0
    return out


class TestSynth:
    def test_deterministic(self, tmp_path):
        ini = write(tmp_path / "ph.ini", PHANTOM_INI)
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--n", "28", "--seed", "1", "--phantom-config", ini]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_zero_volumes(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--n", "0", "--seed", "1"]) == 2

    def test_manifest_valid(self, dataset):
        data = dataset / "data"
        manifest = DatasetManifest.from_dict(json.loads((data / "manifest.json").read_text()))
        depths = {e.volume: load_volume(data / e.volume).depth for e in manifest.entries}
        check_manifest(manifest, depths)
        ann = manifest.by_split("train_labeled")[0]
        plane = load_volume(data / ann.annotation, expect="class")
        np.testing.assert_array_equal(plane, load_volume(data / ann.reference_label).data[ann.slice_index])

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["synth", "--out", str(blocker / "sub"), "--n", "3", "--seed", "0", "--labeled-fraction", "0.5"]) == 3

    def test_env_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("BARELYSEG_DATA", str(tmp_path / "envdata"))
        ini = write(tmp_path / "ph.ini", PHANTOM_INI)
        assert main(["synth", "--n", "3", "--seed", "0", "--phantom-config", ini, "--labeled-fraction", "0.5"]) == 0
        assert (tmp_path / "envdata" / "manifest.json").exists()


class TestConfig:
    def test_unknown_key(self, tmp_path, dataset):
        cfg = write(tmp_path / "bad.ini", "[trainer]\nlearning_rate = 0.1\n")
        assert main(["train", "--data", str(dataset / "data"), "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_unknown_section(self, tmp_path):
        with pytest.raises(Exception, match="unknown section"):
            read_config(write(tmp_path / "x.ini", "[optimizer]\nlr = 1\n"))

    def test_types_checked(self, tmp_path, dataset):
        cfg = write(tmp_path / "bad.ini", "[trainer]\nepochs = 1.5\n")
        assert main(["train", "--data", str(dataset / "data"), "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_values_parsed(self, tmp_path):
        cfg = read_config(write(tmp_path / "ok.ini", "[nfc]\nwindow = 16\nstack_strategy = random\n[trainer]\nlr = 1\n"))
        assert cfg == {"nfc": {"window": 16, "stack_strategy": "random"}, "trainer": {"lr": 1.0}}

    def test_missing_data_dir(self, tmp_path, monkeypatch):
        monkeypatch.delenv("BARELYSEG_DATA", raising=False)
        assert main(["train", "--out", str(tmp_path / "o")]) == 2


class TestTrain:
    def test_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} == {"checkpoint.bvol", "train_log.csv", "resolved_config.ini"}
        rows = list(csv.DictReader(io.StringIO((trained / "train_log.csv").read_text())))
        assert len(rows) == 1 and list(rows[0]) == ["epoch", "l_total", "l_sup_slice", "l_sup_synth", "l_unsup", "val_dsc"]

    def test_resolved_config_reproduces(self, dataset, trained, tmp_path):
        out = tmp_path / "again"
        cfg = str(trained / "resolved_config.ini")
        assert main(["train", "--data", str(dataset / "data"), "--config", cfg, "--out", str(out)]) == 0
        assert (out / "checkpoint.bvol").read_bytes() == (trained / "checkpoint.bvol").read_bytes()

    def test_baseline_has_no_synth_term(self, dataset, tmp_path):
        cfg = write(tmp_path / "t.ini", TRAIN_INI.replace("epochs = 1", "epochs = 2"))
        out = tmp_path / "base"
        assert main(["train", "--data", str(dataset / "data"), "--config", cfg, "--variant", "baseline_mt", "--out", str(out)]) == 0
        rows = list(csv.DictReader(io.StringIO((out / "train_log.csv").read_text())))
        assert len(rows) == 2 and all(float(r["l_sup_synth"]) == 0.0 for r in rows)

    def test_numerical_failure_exit(self, dataset, tmp_path, capsys):
        cfg = write(tmp_path / "t.ini", TRAIN_INI.replace("lr = 0.005", "lr = 1e300"))
        with np.errstate(all="ignore"):
            code = main(["train", "--data", str(dataset / "data"), "--config", cfg, "--out", str(tmp_path / "nan")])
        assert code == 4
        assert "iteration 1" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


class TestEval:
    def test_sanity_mode_range(self, dataset, trained, capsys):
        code = main(["eval", "--checkpoint", str(trained / "checkpoint.bvol"), "--data", str(dataset / "data"), "--split", "train_unlabeled"])
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 4 + 1
        assert all(0 <= float(r["dsc"]) <= 1 for r in rows)

    def test_teacher_records_unused(self, dataset, trained, tmp_path):
        records = load_records(trained / "checkpoint.bvol")
        assert any(k.startswith("teacher/") for k in records)
        save_records(tmp_path / "student_only.bvol", {k: v for k, v in records.items() if not k.startswith("teacher/")})
        outs = []
        for ckpt, out in ((trained / "checkpoint.bvol", tmp_path / "e1"), (tmp_path / "student_only.bvol", tmp_path / "e2")):
            assert main(["eval", "--checkpoint", str(ckpt), "--data", str(dataset / "data"), "--split", "test", "--out", str(out)]) == 0
            outs.append((out / "eval_test.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_leak_restored(self, trained):
        _, cfg = load_student(trained / "checkpoint.bvol")
        assert cfg.leak == 0.1 and cfg.base_channels == 2

    def test_missing_records(self, dataset, trained, tmp_path):
        records = load_records(trained / "checkpoint.bvol")
        save_records(tmp_path / "broken.bvol", {k: v for k, v in records.items() if k != "student/head.w"})
        assert main(["eval", "--checkpoint", str(tmp_path / "broken.bvol"), "--data", str(dataset / "data")]) == 3

    def test_empty_split(self, tmp_path, trained):
        assert main(["synth", "--out", str(tmp_path / "d"), "--n", "3", "--seed", "0", "--labeled-fraction", "0.5",
                     "--phantom-config", write(tmp_path / "p.ini", PHANTOM_INI)]) == 0
        # three volumes leave the validation split empty
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.bvol"), "--data", str(tmp_path / "d"), "--split", "val"]) == 2


class TestAblate:
    def test_unknown_grid(self, tmp_path):
        assert main(["ablate", "--grid", "zoo", "--seeds", "1", "--out", str(tmp_path)]) == 2

    def test_components_one_seed(self, tmp_path, capsys):
        text = TRAIN_INI.replace("lr = 0.005", "lr = 0.005\niterations_per_epoch = 2") + PHANTOM_INI
        cfg = write(tmp_path / "a.ini", text)
        assert main(["ablate", "--grid", "components", "--seeds", "1", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = list(csv.DictReader(io.StringIO((tmp_path / "o" / "components.csv").read_text())))
        assert len([r for r in rows if r["seed"] != "summary"]) == 5
        assert (tmp_path / "o" / "resolved_config.ini").exists()


class TestPreview:
    def _inputs(self, dataset):
        data = dataset / "data"
        manifest = DatasetManifest.from_dict(json.loads((data / "manifest.json").read_text()))
        e = manifest.by_split("train_labeled")[0]
        return str(data / e.volume), str(data / e.reference_label)

    def test_nfc_depth_formula(self, dataset, tmp_path, capsys):
        vol, lab = self._inputs(dataset)
        assert main(["preview-nfc", "--in", vol, "--label", lab, "--out", str(tmp_path / "p")]) == 0
        img = load_volume(tmp_path / "p" / "nfc_image.bvol")
        k = 10  # half of the 20-voxel side
        assert img.depth == patch_count(20, 20, k, 8)
        assert load_volume(tmp_path / "p" / "nfc_label.bvol").shape == (img.depth, 20, 20)

    def test_fsx_identity_case(self, dataset, tmp_path):
        vol, lab = self._inputs(dataset)
        out = tmp_path / "f"
        assert main(["preview-fsx", "--in", vol, "--label", lab, "--alpha", "1", "--beta", "1", "--out", str(out)]) == 0
        synth = load_volume(out / "synth_image.bvol").data
        assert np.abs(load_volume(out / "fx_synth.bvol").data - synth).max() < 1e-6

    def test_seeded(self, dataset, tmp_path):
        vol, lab = self._inputs(dataset)
        for name in ("a", "b"):
            assert main(["preview-fsx", "--in", vol, "--label", lab, "--seed", "3", "--out", str(tmp_path / name)]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_needs_label(self, dataset, tmp_path):
        vol, _ = self._inputs(dataset)
        assert main(["preview-nfc", "--in", vol, "--out", str(tmp_path / "x")]) == 2

    def test_missing_input(self, tmp_path):
        assert main(["preview-nfc", "--in", str(tmp_path / "nope.bvol"), "--label", "x", "--out", str(tmp_path)]) == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "barelyseg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "preview-fsx" in proc.stdout
