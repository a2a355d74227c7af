import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from gradreg.cli import main
from gradreg.config import ConfigError, dump_config, read_config
from gradreg.network import NetConfig, init_parameters
from gradreg.plotting import read_pgm
from gradreg.trainer import save_checkpoint
from gradreg.volume_io import Volume, load_volume, save_volume

SMALL = ["--set", "synth.shape=16,16,16", "--set", "synth.radius=3,5", "--set", "synth.smoothing=5"]
NET_SET = ["--set", "net.channels=4,8", "--set", "net.ds_levels=2", "--set", "loss.ds_weights=1,0.5"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--workdir", str(root), "gen", "--out", "data", "--n", "2", "--seed", "3"] + SMALL) == 0
    return root


@pytest.fixture(scope="module")
def zero_ckpt(dataset):
    cfg = NetConfig(channels=(4, 8), ds_levels=2)
    path = dataset / "zero.ckpt"
    save_checkpoint(path, init_parameters(cfg), {"net": cfg.to_dict()}, 0)
    return path


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert main(["--workdir", str(tmp_path), "gen", "--out", d, "--n", "2", "--seed", "7"] + SMALL) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    first = capsys.readouterr().out.splitlines()[0]
    assert json.loads(first)["event"] == "config"


def test_gen_zero_pairs(tmp_path):
    assert main(["--workdir", str(tmp_path), "gen", "--out", "empty", "--n", "0"]) == 0
    assert (tmp_path / "empty" / "manifest.jsonl").read_text() == ""


def test_unknown_key_exits_2_with_name(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "gen", "--out", "x", "--set", "synth.wobble=3"]) == 2
    assert "synth.wobble" in capsys.readouterr().err


def test_unknown_key_in_file(tmp_path, capsys):
    (tmp_path / "run.ini").write_text("[train]\nlr = 0.01\nmomentum = 0.9\n")
    assert main(["--workdir", str(tmp_path), "gen", "--out", "x", "--config", "run.ini"]) == 2
    assert "train.momentum" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    (tmp_path / "file").write_text("")
    assert main(["--workdir", str(tmp_path), "gen", "--out", "file/sub", "--n", "1"] + SMALL) == 2


def test_config_file_round_trip(tmp_path):
    cfg = read_config(None, ["train.lr=0.003", "net.channels=8,16,16", "train.patch_size=16,16,16"])
    (tmp_path / "c.ini").write_text(dump_config(cfg))
    assert read_config(tmp_path / "c.ini") == cfg
    with pytest.raises(ConfigError):
        read_config(None, ["nosection=1"])


def test_train_identity_pairs_stays_at_zero(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "gen", "--out", "same", "--n", "2", "--set", "synth.amplitude=0",
                 "--set", "synth.noise=0"] + SMALL) == 0
    capsys.readouterr()
    assert main(["--workdir", str(tmp_path), "train", "--manifest", "same/manifest.jsonl", "--out", "run",
                 "--steps", "10", "--lr", "1e-3"] + NET_SET) == 0
    steps = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    steps = [s for s in steps if s["event"] == "step"]
    assert len(steps) == 10 and max(s["total"] for s in steps) < 1e-6
    assert (tmp_path / "run" / "loss_curve.png").stat().st_size > 0
    assert (tmp_path / "run" / "config.ini").exists()


def test_train_with_pretrain_logs_restore(dataset, zero_ckpt, capsys):
    assert main(["--workdir", str(dataset), "train", "--manifest", "data/manifest.jsonl", "--out", "ft",
                 "--steps", "1", "--pretrain", str(zero_ckpt)] + NET_SET) == 0
    events = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert events[0]["event"] == "config"
    restore = [e for e in events if e["event"] == "restore"]
    assert restore and restore[0]["missing"] == []


def test_train_missing_manifest(tmp_path):
    assert main(["--workdir", str(tmp_path), "train", "--manifest", "nope.jsonl", "--out", "r"]) == 2


def test_register_zero_checkpoint(dataset, zero_ckpt):
    d = dataset / "data"
    assert main(["--workdir", str(dataset), "register", "--ckpt", str(zero_ckpt), "--moving",
                 "data/case_000_moving.gvol", "--fixed", "data/case_000_fixed.gvol", "--out", "reg"]) == 0
    out = dataset / "reg"
    mv = load_volume(d / "case_000_moving.gvol")
    np.testing.assert_array_equal(load_volume(out / "moving_warped.gvol").data, mv.data)
    np.testing.assert_array_equal(load_volume(out / "phi_MF.gvol").data, np.indices((16, 16, 16)))
    for name in ("moving", "fixed", "deformed", "grid"):
        assert read_pgm(out / f"slice_{name}.pgm").shape == (16, 16)
    np.testing.assert_array_equal(read_pgm(out / "slice_moving.pgm"), read_pgm(out / "slice_deformed.pgm"))
    assert (out / "panel.png").stat().st_size > 0


def test_register_shape_mismatch(dataset, zero_ckpt, capsys):
    save_volume(Volume(np.zeros((1, 8, 16, 16), np.float32)), dataset / "small.gvol")
    rc = main(["--workdir", str(dataset), "register", "--ckpt", str(zero_ckpt), "--moving", "small.gvol",
               "--fixed", "data/case_000_fixed.gvol", "--out", "bad"])
    assert rc == 2 and "differ" in capsys.readouterr().err


def test_evaluate_identity_equals_baseline(dataset, zero_ckpt, capsys):
    assert main(["--workdir", str(dataset), "register", "--ckpt", str(zero_ckpt), "--manifest",
                 "data/manifest.jsonl", "--out", "pred", "--no-slices"]) == 0
    capsys.readouterr()
    assert main(["--workdir", str(dataset), "evaluate", "--pred-dir", "pred", "--manifest",
                 "data/manifest.jsonl"]) == 0
    out = capsys.readouterr().out
    rows = {line.split("\t")[0]: line.split("\t")[1:] for line in out.splitlines() if line}
    assert rows["Unregistered"][:3] == rows["Registered"][:3]
    assert rows["Registered"][3] == "0.0000"
    assert (dataset / "pred" / "eval.png").exists() and (dataset / "pred" / "eval.tsv").exists()


def test_evaluate_ground_truth_scores_one(dataset, capsys):
    for case in ("case_000", "case_001"):
        (dataset / "gt" / case).mkdir(parents=True, exist_ok=True)
        shutil.copy(dataset / "data" / f"{case}_phi_gt.gvol", dataset / "gt" / case / "phi_MF.gvol")
    assert main(["--workdir", str(dataset), "evaluate", "--pred-dir", "gt", "--manifest", "data/manifest.jsonl"]) == 0
    table = capsys.readouterr().out.split("\n\n")[0].splitlines()[1:]
    assert table and all(line.split("\t")[2] == "1.000000" for line in table)


def test_evaluate_missing_predictions(dataset, capsys):
    (dataset / "none").mkdir(exist_ok=True)
    assert main(["--workdir", str(dataset), "evaluate", "--pred-dir", "none", "--manifest",
                 "data/manifest.jsonl"]) == 2
    err = capsys.readouterr().err
    assert "case_000" in err and "case_001" in err


def test_gradcheck_passes_and_detects_corruption(capsys):
    assert main(["gradcheck", "--n-seeds", "1"]) == 0
    capsys.readouterr()
    assert main(["gradcheck", "--n-seeds", "1", "--corrupt", "ncc"]) == 1
    assert "ncc" in capsys.readouterr().err


@pytest.mark.parametrize("seed", [0, 20, 40, 60, 80])
def test_gradcheck_other_seeds(seed):
    assert main(["gradcheck", "--seed", str(seed), "--n-seeds", "2"]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gradreg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "gradreg.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
