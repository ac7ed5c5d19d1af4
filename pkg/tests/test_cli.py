import json

import pytest

from conftest import small_config
from lpreg.cli import _grid_points, main
from lpreg.config import dump_config


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.json"
    dump_config(small_config(**{"telemetry.plots": True}), path)
    return path


def test_train_eval_plot(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert "wrote 7 metric rows" in capsys.readouterr().out
    assert (out / "config.json").exists() and (out / "curves.svg").exists()

    assert main(["export-evalset", "--config", str(cfg_path), "--out", str(tmp_path / "e.jsonl"), "-n", "20"]) == 0
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "ckpt" / "step_000006.ckpt"), "--eval-set",
                 str(tmp_path / "e.jsonl")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["n"] == 20 and 0.0 <= res["accuracy"] <= 1.0

    (out / "gap.svg").unlink()
    assert main(["plot", "--run", str(out), "--figure", "gap"]) == 0
    assert (out / "gap.svg").exists()


def test_resume_via_cli(tmp_path, cfg_path):
    out = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--out", str(out)])
    before = (out / "metrics.csv").read_bytes()
    assert main(["train", "--config", str(cfg_path), "--out", str(out), "--resume",
                 str(out / "ckpt" / "step_000003.ckpt")]) == 0
    assert (out / "metrics.csv").read_bytes() == before


def test_ablate_grid(tmp_path, cfg_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"objective.rho": [0.005, 0.015], "schedule.max_steps": [2]}))
    assert main(["ablate", "--config", str(cfg_path), "--grid", str(grid), "--out", str(tmp_path / "abl")]) == 0
    summary = json.loads((tmp_path / "abl" / "summary.json").read_text())
    assert [s["overrides"]["objective.rho"] for s in summary] == [0.005, 0.015]
    for s in summary:
        echo = json.loads((tmp_path / "abl" / s["run"] / "config.json").read_text())
        assert echo["objective"]["rho"] == s["overrides"]["objective.rho"]


def test_grid_forms():
    assert _grid_points({"runs": [{"a.b": 1}]}) == [{"a.b": 1}]
    assert len(_grid_points({"x.y": [1, 2], "z.w": [3, 4, 5]})) == 6


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schedule": {"mini_batch": 0}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "schedule" in capsys.readouterr().err
