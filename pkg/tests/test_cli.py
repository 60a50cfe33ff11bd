import json
import subprocess
import sys

import numpy as np
import pytest

from meanflow_dance.checkpoint import load_checkpoint
from meanflow_dance.cli import main
from meanflow_dance.data import load_dataset, load_record
from meanflow_dance.metrics import read_report

TINY = {"network": {"latent_dim": 8, "d_state": 2, "conv_kernel": 3, "cond_layers": 1, "gen_blocks": 1},
        "train": {"batch_size": 2, "window": 24, "stride": 24, "log_every": 1, "ckpt_every": 0}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--out", str(root / "data"), "--sequences", "3", "--frames", "24"]) == 0
    assert main(["train", "--config", str(root / "tiny.json"), "--data", str(root / "data"),
                 "--out", str(root / "m.fldn"), "--steps", "2", "--fcl"]) == 0
    return root


def test_gen_data_writes_manifest(workspace):
    recs = load_dataset(workspace / "data")
    assert len(recs) == 3 and recs[0].T == 24
    assert (workspace / "data" / "manifest.txt").read_text().split() == [f"seq0000{i}.fdr" for i in range(3)]


def test_train_writes_checkpoint_and_log(workspace):
    ck = load_checkpoint(workspace / "m.fldn")
    assert ck.step == 2 and ck.meta["config"]["loss"]["fcl"] == 0.1
    lines = (workspace / "m.fldn.log").read_text().splitlines()
    assert lines[0].startswith("step=1 l_mf=") and "l_fcl=" in lines[0]


def test_resume_continues_the_step_count(workspace):
    assert main(["train", "--resume", str(workspace / "m.fldn"), "--data", str(workspace / "data"),
                 "--out", str(workspace / "m2.fldn"), "--steps", "3"]) == 0
    assert load_checkpoint(workspace / "m2.fldn").step == 3


def test_sample_is_reproducible(workspace):
    music = workspace / "data" / "seq00000.fdr"
    outs = []
    for name in ("a.fdr", "b.fdr"):
        assert main(["sample", "--ckpt", str(workspace / "m.fldn"), "--music", str(music),
                     "--steps", "2", "--seed", "4", "--out", str(workspace / name)]) == 0
        outs.append(load_record(workspace / name))
    np.testing.assert_array_equal(outs[0].motion.frames, outs[1].motion.frames)
    np.testing.assert_array_equal(outs[0].music.features, load_record(music).music.features)


def test_sample_rejects_unknown_solver(workspace, capsys):
    with pytest.raises(SystemExit):
        main(["sample", "--ckpt", str(workspace / "m.fldn"), "--music", "x", "--out", "y",
              "--solver", "rk4"])
    assert "{euler, midpoint, heun}" in capsys.readouterr().err


def test_guidance_without_dropout_warns(workspace, caplog):
    music = workspace / "data" / "seq00000.fdr"
    with caplog.at_level("WARNING"):
        assert main(["sample", "--ckpt", str(workspace / "m.fldn"), "--music", str(music),
                     "--steps", "1", "--guidance", "2", "--out", str(workspace / "g.fdr")]) == 0
    assert "cfg-dropout" in caplog.text


def test_edit_writes_motion_and_jerk_report(workspace):
    spec = workspace / "edit.txt"
    spec.write_text("mode hard\nframes 0:6 channels all\nframes 18:24 channels root\n")
    out = workspace / "e.fdr"
    assert main(["edit", "--ckpt", str(workspace / "m.fldn"), "--music",
                 str(workspace / "data" / "seq00001.fdr"), "--edit", str(spec), "--steps", "3",
                 "--out", str(out)]) == 0
    assert load_record(out).T == 24
    report = (workspace / "e.fdr.jerk.txt").read_text()
    assert "mode = hard" in report and "edges = 6 18" in report and "boundary_jerk = " in report


def test_edit_spec_errors_are_reported(workspace, capsys):
    spec = workspace / "bad.txt"
    spec.write_text("frames 0:6\nchannels arms\n")
    assert main(["edit", "--ckpt", str(workspace / "m.fldn"), "--music",
                 str(workspace / "data" / "seq00001.fdr"), "--edit", str(spec), "--out",
                 str(workspace / "x.fdr")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_eval_and_curves(workspace):
    rep = workspace / "report.txt"
    assert main(["eval", "--gen", str(workspace / "data"), "--ref", str(workspace / "data"),
                 "--out", str(rep), "--csv", str(workspace / "rows.csv")]) == 0
    vals = read_report(rep)
    assert list(vals) == ["fid_k", "fid_g", "div_k", "div_g", "fsr", "bas"]
    assert vals["fid_k"] == 0.0
    assert main(["curves", "--log", str(workspace / "m.fldn.log"), "--out", str(workspace / "c.csv")]) == 0
    lines = (workspace / "c.csv").read_text().splitlines()
    assert lines[0] == "step,l_mf,l_rec,l_pos,l_vel,total" and len(lines) == 3


def test_errors_exit_with_code_2(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"steps": 0}}))
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"), "--out", "x"]) == 2
    assert main(["eval", "--gen", str(tmp_path / "nope"), "--ref", str(workspace / "data"),
                 "--out", "r"]) == 2
    (tmp_path / "junk.fdr").write_bytes(b"JUNKJUNK")
    assert main(["sample", "--ckpt", str(workspace / "m.fldn"), "--music", str(tmp_path / "junk.fdr"),
                 "--out", str(tmp_path / "o.fdr")]) == 2
    assert capsys.readouterr().err.count("error:") == 3


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "meanflow_dance.cli", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("gen-data", "train", "sample", "edit", "eval", "curves"):
        assert cmd in out.stdout
