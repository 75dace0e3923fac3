import json
import subprocess
import sys

import pytest

from cropgrasp.cli import main, render
from cropgrasp.config import Config


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A config with one-epoch training and its synthesized 10-scene dataset."""
    root = tmp_path_factory.mktemp("cli")
    cfg = Config().to_dict()
    cfg["train_detector"]["epochs"] = 1
    cfg["train_grasper"]["epochs"] = 1
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert main(["--config", str(cfg_path), "synth", "--out", str(root / "ds"), "--n", "10"]) == 0
    return root, cfg_path


def test_missing_config_is_usage_error(capsys):
    assert main(["synth", "--out", "x"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--config" in err


def test_unknown_flag_and_missing_subcommand(capsys, tiny):
    _, cfg = tiny
    assert main(["--config", str(cfg), "eval", "--data", "x", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err
    assert main(["--config", str(cfg)]) == 1


def test_runtime_failure_exit_code(capsys, tiny):
    root, cfg = tiny
    assert main(["--config", str(cfg), "eval", "--data", str(root / "missing")]) == 2
    assert "IoFailure" in capsys.readouterr().err
    bad = root / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["--config", str(bad), "eval", "--data", str(root / "ds")]) == 2


def test_synth_reports_splits(capsys, tmp_path, tiny):
    _, cfg = tiny
    assert main(["--seed", "4", "--config", str(cfg), "synth", "--out", str(tmp_path / "d"), "--n", "10"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["splits"] == {"train": 7, "val": 1, "test": 2}


def test_eval_oracle_is_perfect(capsys, tiny):
    root, cfg = tiny
    report_path = root / "eval.json"
    assert main(["--config", str(cfg), "eval", "--data", str(root / "ds"), "--split", "train",
                 "--out", str(report_path)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["map"] == 1.0 and rep["grasp_success_rate"] == 1.0
    assert json.loads(report_path.read_text()) == rep
    assert len(rep["config_digest"]) == 64


def test_train_then_eval_checkpoints(capsys, tiny):
    root, cfg = tiny
    ds = str(root / "ds")
    assert main(["--config", str(cfg), "train-detector", "--data", ds, "--out", str(root / "d.ckpt"),
                 "--log", str(root / "d.jsonl")]) == 0
    assert main(["--config", str(cfg), "train-grasper", "--data", ds, "--out", str(root / "g.ckpt"),
                 "--log", str(root / "g.jsonl")]) == 0
    for log in ("d.jsonl", "g.jsonl"):
        lines = (root / log).read_text().splitlines()
        assert len(lines) == 1
        assert set(json.loads(lines[0])) == {"epoch", "mean_loss", "batches", "clamped_sqrt_count"}
    capsys.readouterr()
    assert main(["--config", str(cfg), "eval", "--data", ds, "--detector", str(root / "d.ckpt"),
                 "--grasper", str(root / "g.ckpt")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0.0 <= rep["map"] <= 1.0
    assert rep["checkpoint_digest"].startswith("detector:")


def test_run_is_deterministic(tmp_path, tiny):
    _, cfg = tiny
    outs = []
    for name in ("a.ppm", "b.ppm"):
        proc = subprocess.run([sys.executable, "-m", "cropgrasp", "--config", str(cfg), "--seed", "7", "run",
                               "--render", str(tmp_path / name)], capture_output=True, text=True, check=True)
        outs.append(proc.stdout)
    assert outs[0] == outs[1]
    result = json.loads(outs[0])
    assert result["success"] is True and result["matched_object"] is not None
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n256 256\n255\n")


def test_render_draws_outline():
    import numpy as np

    from cropgrasp.detgeom import BBox, Detection

    d = Detection(BBox(0.5, 0.5, 0.5, 0.5), 0, 1.0, 1.0, 1.0)
    img = render(np.zeros((3, 16, 16), dtype=np.float32), [d], (0.5, 0.5), scale=2)
    assert img.shape == (3, 32, 32)
    assert img.max() == 1.0
