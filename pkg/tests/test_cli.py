import os
import xml.etree.ElementTree as ET

import pytest

from relmm import cli
from relmm import orchestrator as O
from relmm import persist as P
from relmm import plot

TINY = """
[run]
curriculum = "stationary"
steps = 40
checkpoint_every = 20

[grasp]
n_pt = 10
members = 2
batch_size = 8

[nav]
batch_size = 8
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "room.toml"
    p.write_text(TINY)
    return p


def rows(path, event=None):
    return [r for r in P.read_rows(path) if event is None or r["event"] == event]


def without_wall_time(rs):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in rs]


def test_train_writes_rows_checkpoints_and_policy(cfg_path, tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "1", "--steps", "30",
                     "--out", str(out)]) == 0
    assert len(rows(out / "metrics.csv", "train")) == 30
    assert len(rows(out / "metrics.csv", "pretrain")) == 10
    assert (out / "policy.ckpt").exists() and not (out / ".lock").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "step_0000020.ckpt", "step_0000030.ckpt"]
    # the policy file evaluates
    assert cli.main(["eval", "--checkpoint", str(out / "policy.ckpt"), "--seeds", "2",
                     "--horizon", "250", "--out", str(tmp_path / "e.csv")]) == 0
    ev = rows(tmp_path / "e.csv")
    assert len(ev) == 2 and {r["horizon"] for r in ev} == {"250"}


def test_resume_after_interruption_reproduces_csv(cfg_path, tmp_path, monkeypatch):
    full = tmp_path / "a" / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(full)]) == 0

    cut = tmp_path / "b" / "run"
    real = O._main_step

    def interrupted(rs, autocurr):
        if rs.step == 27:
            raise KeyboardInterrupt
        return real(rs, autocurr)

    monkeypatch.setattr(O, "_main_step", interrupted)
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(cut),
                     "--keep-checkpoints", "0"]) == cli.EXIT_INTERRUPTED
    assert (cut / "checkpoints" / "abort_step_0000027.ckpt").exists()
    assert len(rows(cut / "metrics.csv", "train")) == 27  # logs were flushed
    monkeypatch.setattr(O, "_main_step", real)

    ck = cut / "checkpoints" / "step_0000020.ckpt"
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(cut),
                     "--resume", str(ck)]) == 0
    assert without_wall_time(rows(cut / "metrics.csv")) == without_wall_time(rows(full / "metrics.csv"))


def test_unknown_key_is_reported(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text(TINY + "mystery = 3\n")
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "nav.mystery" in err and "bad.toml:" in err


def test_locked_output_directory(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / ".lock").write_text(str(os.getpid()))
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(out)]) == cli.EXIT_USAGE
    assert "in use" in capsys.readouterr().err
    # a lock left by a dead process is taken over
    (out / ".lock").write_text("999999999")
    assert cli.main(["train", "--config", str(cfg_path), "--steps", "5", "--out", str(out)]) == 0


def test_eval_baselines(tmp_path, capsys):
    assert cli.main(["eval", "--baseline", "rand_all", "--seeds", "5",
                     "--out", str(tmp_path / "r.csv")]) == 0
    rs = rows(tmp_path / "r.csv")
    assert len(rs) == 5 and all(r["event"] == "eval" and r["variant"] == "rand_all" for r in rs)
    assert cli.main(["eval", "--baseline", "scripted", "--seeds", "1"]) == 0
    assert capsys.readouterr().out.startswith(",".join(P.COLUMNS))
    assert cli.main(["eval", "--baseline", "rand_nav"]) == cli.EXIT_USAGE
    assert "grasp-checkpoint" in capsys.readouterr().err
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == cli.EXIT_USAGE


def test_rand_nav_with_grasp_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", str(cfg_path), "--steps", "5", "--out", str(out)])
    assert cli.main(["eval", "--baseline", "rand_nav", "--grasp-checkpoint",
                     str(out / "policy.ckpt"), "--seeds", "2", "--out", str(tmp_path / "e.csv")]) == 0
    assert len(rows(tmp_path / "e.csv")) == 2


def test_ablate(cfg_path, tmp_path, capsys):
    assert cli.main(["ablate", "--variant", "bogus"]) == cli.EXIT_USAGE
    assert "no_uncertainty" in capsys.readouterr().err
    assert cli.main(["ablate", "--variant", "no_uncertainty", "--budget", "20", "--seeds", "2",
                     "--config", str(cfg_path), "--eval-every", "10", "--eval-rooms", "1",
                     "--out", str(tmp_path / "a.csv")]) == 0
    rs = rows(tmp_path / "a.csv")
    assert [(r["seed"], r["step"]) for r in rs] == [("0", "10"), ("0", "20"), ("1", "10"), ("1", "20")]


def test_plot_is_valid_and_deterministic(tmp_path):
    csv = tmp_path / "m.csv"
    with P.MetricsCSV(csv) as m:
        m.write(run_id="r", step=1, event="train", r_g=0, r_n=-1.0)
        m.write(run_id="r", step=2, event="train", r_g=1, r_n=0.0)
    a = [p.read_bytes() for p in plot.plot_csvs([csv], tmp_path / "a")]
    assert cli.main(["plot", "--csv", str(csv), "--out", str(tmp_path / "b")]) == 0
    files = sorted((tmp_path / "b").glob("*.svg"))
    assert [f.name for f in files] == ["r_g.svg", "r_n.svg"]
    for f, raw in zip(files, a):
        assert f.stat().st_size > 0 and f.read_bytes() == raw
        ET.fromstring(raw)
