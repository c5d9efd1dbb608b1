import os

import numpy as np
import pytest

from pdegnn.cli import read_config, run
from pdegnn.formats import load_graph, load_trajectory
from pdegnn.plot import read_ppm

SIM_EXAMPLE = ["simulate", "--pde", "heat", "--bc", "top=200,left=0,right=0,bottom=0",
               "--nodes", "256", "--t-end", "0.064", "--dt", "8e-4", "--record-every", "20",
               "--seed", "1"]


def cli(tmp_path, *argv):
    return run([*argv, "--out-dir", str(tmp_path)])


def test_simulate_example(tmp_path, capsys):
    assert cli(tmp_path, *SIM_EXAMPLE, "-o", "traj.ptr") == 0
    tr = load_trajectory(tmp_path / "traj.ptr")
    assert tr.n_frames == 5
    assert tr.frames.min() >= 0.0 and tr.frames.max() <= 200.0
    assert tr.frames[-1].max() > 100.0
    assert "frames 5" in capsys.readouterr().out


def test_help_exits_zero(capsys):
    assert run(["train", "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_unknown_flag(tmp_path, capsys):
    assert cli(tmp_path, "mesh", "--bogus", "-o", "g.pgn") != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: usage:")


def test_conflicting_flags(tmp_path, capsys):
    assert cli(tmp_path, "mesh", "--nodes", "10", "--edge-length", "0.1", "-o", "g.pgn") != 0
    assert capsys.readouterr().err.startswith("error: conflict:")


def test_missing_input_file(tmp_path, capsys):
    assert cli(tmp_path, "plot", "--traj", str(tmp_path / "nope.ptr"), "-o", "x") != 0
    err = capsys.readouterr().err
    assert err.startswith("error: missing-file:") and "nope.ptr" in err


def test_mesh_edge_length(tmp_path, capsys):
    assert cli(tmp_path, "mesh", "--edge-length", "0.1", "-o", "g.pgn") == 0
    g = load_graph(tmp_path / "g.pgn")
    assert g.violations() == []
    mean = float(capsys.readouterr().out.split("mean_edge")[1])
    assert 0.08 <= mean <= 0.12


def test_resolved_config_round_trip(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run([*SIM_EXAMPLE, "--nodes", "40", "-o", "t.ptr", "--out-dir", str(a)]) == 0
    cfgs = [p for p in os.listdir(a) if p.endswith(".cfg")]
    assert len(cfgs) == 1 and cfgs[0].startswith("simulate-")
    conf = read_config(a / cfgs[0])
    assert conf["nodes"] == "40" and conf["bc"] == "top=200,left=0,right=0,bottom=0"
    assert run(["simulate", "--config", str(a / cfgs[0]), "--out-dir", str(b)]) == 0
    assert (a / "t.ptr").read_bytes() == (b / "t.ptr").read_bytes()
    # same settings, same config name
    assert sorted(p for p in os.listdir(b) if p.endswith(".cfg")) == cfgs


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nodes = 30\nseed = 4\n")
    assert cli(tmp_path, "mesh", "--config", str(cfg), "--nodes", "12", "-o", "g.pgn") == 0
    interior = (load_graph(tmp_path / "g.pgn").flags == 0).sum()
    assert interior == 12


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    assert cli(tmp_path, "mesh", "--config", str(cfg), "-o", "g.pgn") != 0
    assert "colour" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workflow(tmp_path_factory):
    d = tmp_path_factory.mktemp("wf")
    assert run(["dataset", "--sims", "5", "--nodes", "15", "--steps", "60", "--n", "3", "--gap", "5",
                "--max-windows", "2", "--split", "0.6,0.2,0.2", "-o", "d.manifest",
                "--out-dir", str(d)]) == 0
    assert run(["train", "--dataset", str(d / "d.manifest"), "--epochs", "2", "--layers", "2",
                "--latent", "8", "--hidden", "8", "-o", "m.pmp", "--out-dir", str(d)]) == 0
    return d


def test_train_outputs(workflow):
    assert (workflow / "m.pmp").exists() and (workflow / "m.pmp.last").exists()
    lines = (workflow / "m-loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss" and len(lines) == 3


def test_eval_report(workflow, capsys):
    assert run(["eval", "--checkpoint", str(workflow / "m.pmp"), "--dataset",
                str(workflow / "d.manifest"), "-o", "r.csv", "--out-dir", str(workflow)]) == 0
    assert "mean MSE" in capsys.readouterr().out
    assert len((workflow / "r.csv").read_text().splitlines()) == 3


def test_rollout_eight_rows(workflow):
    traj = sorted(workflow.glob("d-*.ptr"))[0]
    assert run(["rollout", "--steps", "8", "--checkpoint", str(workflow / "m.pmp"), "--traj",
                str(traj), "-o", "roll.csv", "--out-dir", str(workflow)]) == 0
    rows = (workflow / "roll.csv").read_text().splitlines()
    assert rows[0] == "step,frame,mse,rel_l2" and len(rows) == 9
    assert [int(r.split(",")[0]) for r in rows[1:]] == list(range(1, 9))


def test_plot_triptych_and_field(workflow):
    traj = sorted(workflow.glob("d-*.ptr"))[0]
    assert run(["plot", "--traj", str(traj), "--checkpoint", str(workflow / "m.pmp"),
                "--width", "20", "--height", "10", "-o", "tri", "--out-dir", str(workflow)]) == 0
    assert read_ppm((workflow / "tri.ppm").read_bytes()).shape[0] == 10
    assert run(["plot", "--traj", str(traj), "--frame", "3", "-o", "f",
                "--out-dir", str(workflow)]) == 0
    assert (workflow / "f.csv").read_text().startswith("x,y,value\n")


def test_plot_length_mismatch(tmp_path, capsys):
    assert cli(tmp_path, "mesh", "--nodes", "10", "-o", "g.pgn") == 0
    np.savetxt(tmp_path / "v.txt", np.zeros(3))
    assert cli(tmp_path, "plot", "--graph", str(tmp_path / "g.pgn"), "--values",
               str(tmp_path / "v.txt"), "-o", "p") != 0
    assert capsys.readouterr().err.startswith("error: shape:")


def test_validate_ok_and_corrupt(workflow, capsys):
    files = [str(workflow / "m.pmp"), str(workflow / "d.manifest"),
             str(sorted(workflow.glob("d-*.ptr"))[0])]
    assert run(["validate", *files, "--out-dir", str(workflow)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == [f"{f}: OK" for f in files]
    bad = workflow / "bad.ptr"
    data = bytearray(open(files[2], "rb").read())
    data[-20] ^= 0x40
    bad.write_bytes(bytes(data))
    assert run(["validate", str(bad), "--out-dir", str(workflow)]) == 1
    assert "checksum" in capsys.readouterr().out
