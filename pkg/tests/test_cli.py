import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from xmgc import cli, training
from xmgc import data_pipeline as dp

TINY = dict(resolution=32, batch_size=2, iterations=3, gen_depth=4, gen_base_filters=4,
            disc_base_filters=4, jitter_margin=2, l1_weight=100.0, seed=0)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    assert cli.main(["dataset", "prepare", "--root", str(root),
                     "--synthetic", "classes=3", "pairs=2", "res=32", "seed=1"]) == 0
    return root


def write_config(tmp_path, dataset, **overrides):
    cfg = dict(TINY, dataset_root=str(dataset), output_dir=str(tmp_path / "runs"), experiment_tag="t")
    cfg.update(overrides)
    path = tmp_path / f"cfg_{len(list(tmp_path.glob('cfg_*')))}.json"
    path.write_text(json.dumps(cfg))
    return path


# --- dataset prepare -------------------------------------------------------------------

def test_prepare_synthetic_counts_and_idempotent(tmp_path):
    root = tmp_path / "syn"
    args = ["dataset", "prepare", "--root", str(root), "--synthetic", "classes=11", "pairs=10", "res=64", "seed=7"]
    assert cli.main(args) == 0
    assert len(list((root / "visual").glob("*.png"))) == 110
    assert len(list((root / "tactile").glob("*.png"))) == 110
    first = (root / "manifest.csv").read_bytes()
    assert len(first.decode().splitlines()) == 111
    assert cli.main(args) == 0
    assert (root / "manifest.csv").read_bytes() == first


def test_prepare_existing_root_and_roi(dataset, tmp_path):
    roi = tmp_path / "roi.csv"
    roi.write_text("tactile_path,roi_x,roi_y,roi_w,roi_h\ntactile/cloth00_0.png,2,2,16,16\n")
    out = tmp_path / "m.csv"
    assert cli.main(["dataset", "prepare", "--root", str(dataset), "--roi-manifest", str(roi),
                     "--manifest", str(out)]) == 0
    rows = dp.read_manifest(out).rows
    # paths are relative to the manifest's own directory
    assert [r.roi for r in rows if r.tactile_path == "data/tactile/cloth00_0.png"] == [(2, 2, 16, 16)]
    assert sum(r.roi is not None for r in rows) == 1


def test_prepare_missing_root_is_usage_error(tmp_path, capsys):
    assert cli.main(["dataset", "prepare", "--root", str(tmp_path / "nope")]) == 2
    assert "not a readable directory" in capsys.readouterr().err


def test_prepare_bad_synthetic_key(tmp_path):
    assert cli.main(["dataset", "prepare", "--root", str(tmp_path), "--synthetic", "colours=3"]) == 2


def test_unknown_command_is_usage_error(capsys):
    assert cli.main(["fly"]) == 2


# --- train ----------------------------------------------------------------------------

def test_train_writes_artifacts_and_is_repeatable(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path, dataset)
    assert cli.main(["train", "--config", str(cfg), "--log-every", "1"]) == 0
    out = capsys.readouterr().out
    assert "iter=3 " in out and "checkpoint=" in out
    run = tmp_path / "runs" / "t"
    first = (run / "loss_log.csv").read_bytes()
    assert (run / "final.xmgc").exists()
    assert cli.main(["train", "--config", str(cfg)]) == 0
    assert (run / "loss_log.csv").read_bytes() == first


def test_train_direction_flag_swaps_roles(dataset, tmp_path):
    logs = {}
    for flag in ("v2t", "t2v"):
        cfg = write_config(tmp_path, dataset, experiment_tag=flag)
        assert cli.main(["train", "--config", str(cfg), "--direction", flag]) == 0
        ck = training.load_checkpoint(tmp_path / "runs" / flag / "final.xmgc")
        assert ck.config.direction == cli.DIRECTION_FLAGS[flag]
        logs[flag] = (tmp_path / "runs" / flag / "loss_log.csv").read_bytes()
    assert logs["v2t"] != logs["t2v"]


def test_train_unknown_key_named(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path, dataset, learning_rat=0.1)
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "learning_rat" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [dict(learning_rate=-1), dict(direction="up")])
def test_train_invalid_value(dataset, tmp_path, bad):
    assert cli.main(["train", "--config", str(write_config(tmp_path, dataset, **bad))]) == 2


def test_train_missing_config_and_data(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "none.json")]) == 2
    (tmp_path / "c.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 2


def test_train_nan_exits_3(dataset, tmp_path, monkeypatch):
    real_step = training.rmsprop_step

    def poisoned(params, state, *args, **kwargs):
        real_step(params, state, *args, **kwargs)
        for _, t in params:
            t.data[...] = np.nan

    monkeypatch.setattr(training, "rmsprop_step", poisoned)
    assert cli.main(["train", "--config", str(write_config(tmp_path, dataset))]) == 3


def test_train_resume(dataset, tmp_path):
    full = write_config(tmp_path, dataset, iterations=4, experiment_tag="full")
    half = write_config(tmp_path, dataset, iterations=2, experiment_tag="half")
    rest = write_config(tmp_path, dataset, iterations=4, experiment_tag="rest")
    assert cli.main(["train", "--config", str(full)]) == 0
    assert cli.main(["train", "--config", str(half)]) == 0
    assert cli.main(["train", "--config", str(rest), "--resume",
                     str(tmp_path / "runs" / "half" / "final.xmgc")]) == 0
    runs = tmp_path / "runs"
    assert (runs / "rest" / "final.xmgc").read_bytes() == (runs / "full" / "final.xmgc").read_bytes()


def test_xmgc_threads_must_be_integer(monkeypatch, tmp_path):
    monkeypatch.setenv("XMGC_THREADS", "many")
    assert cli.main(["dataset", "prepare", "--root", str(tmp_path), "--synthetic", "classes=2", "pairs=1"]) == 2


# --- generate and eval ---------------------------------------------------------------------

@pytest.fixture
def trained(dataset, tmp_path):
    assert cli.main(["train", "--config", str(write_config(tmp_path, dataset))]) == 0
    return tmp_path / "runs" / "t" / "final.xmgc"


def test_generate_then_eval_ssim(dataset, trained, tmp_path, capsys):
    before = tree_digest(dataset)
    out = tmp_path / "gen"
    assert cli.main(["generate", "--checkpoint", str(trained), "--inputs", str(dataset / "visual"),
                     "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == sorted(p.name for p in (dataset / "visual").iterdir())
    assert tree_digest(dataset) == before
    capsys.readouterr()
    csv_path = tmp_path / "scores.csv"
    assert cli.main(["eval", "ssim", "--generated", str(out), "--real", str(dataset / "tactile"),
                     "--csv", str(csv_path)]) == 0
    line = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("mean_colour_ssim=")][0]
    value = float(line.split("=")[1])
    assert -1 < value < 1
    assert len(csv_path.read_text().splitlines()) == 7
    # a second generate pass is byte-identical
    assert cli.main(["generate", "--checkpoint", str(trained), "--inputs", str(dataset / "visual"),
                     "--out", str(tmp_path / "gen2")]) == 0
    assert tree_digest(out) == tree_digest(tmp_path / "gen2")


@pytest.mark.parametrize("flag", [[], ["--windowed"]])
def test_eval_ssim_identical_dirs(dataset, capsys, flag):
    d = str(dataset / "visual")
    assert cli.main(["eval", "ssim", "--generated", d, "--real", d, *flag]) == 0
    assert "mean_colour_ssim=1.0" in capsys.readouterr().out.splitlines()


def test_generate_version_mismatch_exits_4(trained, dataset, tmp_path, capsys):
    data = bytearray(trained.read_bytes())
    data[4:8] = (7).to_bytes(4, "little")
    bad = tmp_path / "bad.xmgc"
    bad.write_bytes(bytes(data))
    assert cli.main(["generate", "--checkpoint", str(bad), "--inputs", str(dataset / "visual"),
                     "--out", str(tmp_path / "o")]) == 4
    assert "version_mismatch" in capsys.readouterr().err


def test_eval_classify_real_only(dataset, capsys, tmp_path):
    csv_path = tmp_path / "acc.csv"
    assert cli.main(["eval", "classify", "--manifest", str(dataset / "manifest.csv"), "--epochs", "2",
                     "--resolution", "32", "--overfit", "--csv", str(csv_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "iteration,visual_real"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "2"]
    assert csv_path.read_text().splitlines()[0] == "iteration,real_acc,realgen_acc,modality"


def test_eval_classify_with_generated_both_modalities(dataset, capsys):
    gen = dataset  # visual/ and tactile/ subdirectories with dataset filenames
    assert cli.main(["eval", "classify", "--manifest", str(dataset / "manifest.csv"), "--epochs", "1",
                     "--resolution", "32", "--overfit", "--modality", "both", "--generated", str(gen)]) == 0
    header = capsys.readouterr().out.strip().splitlines()[0]
    assert header == "iteration,visual_real,visual_realgen,tactile_real,tactile_realgen"


def test_module_and_console_script_entry_points(tmp_path):
    for cmd in ([sys.executable, "-m", "xmgc"], ["xmgc"]):
        root = tmp_path / cmd[-1]
        proc = subprocess.run([*cmd, "dataset", "prepare", "--root", str(root), "--synthetic", "classes=2",
                               "pairs=1", "res=16"], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "rows=2" in proc.stdout
        assert subprocess.run([*cmd, "train"], capture_output=True).returncode == 2
