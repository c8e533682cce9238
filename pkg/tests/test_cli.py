import json

import numpy as np
import pytest

from odeflow import cli, models
from odeflow.dynamics import OdeBlockParams, save_params


def tiny_config(tmp_path, **over):
    cfg = {
        "seed": 0,
        "out_dir": "run",
        "teacher_checkpoint": "run/teacher.odev",
        "data": {"train": "data/train.bin", "eval": "data/eval.bin", "num_classes": 2},
        "model": {"patch_size": 16, "dim": 8, "heads": 2, "depth": 2, "teacher_mlp_ratio": 1,
                  "mlp_ratio": 1, "N": 4},
        "teacher": {"epochs": 1, "batch_size": 8},
        "train": {"epochs": 1, "batch_size": 8},
        "distill": {"epochs": 2, "batch_size": 8, "jasmin_maps": 2},
    }
    for k, v in over.items():
        cfg[k].update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


@pytest.fixture
def workspace(tmp_path):
    assert cli.main(["gen-data", "--n", "16", "--n-eval", "8", "--classes", "2", "--out",
                     str(tmp_path / "data")]) == 0
    return tmp_path


def test_gen_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["gen-data", "--n", "8", "--out", str(tmp_path / d)]) == 0
    for name in ("train.bin", "eval.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.bin").stat().st_size == 8 * 3073
    assert (tmp_path / "a" / "eval.bin").stat().st_size == 2 * 3073
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["command"] == "gen-data" and m["seed"] == 0


def test_gen_data_rejects_other_sizes(tmp_path, capsys):
    assert cli.main(["gen-data", "--size", "16", "--out", str(tmp_path)]) == 2


def test_unknown_key_reports_path_and_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "model": {\n    "dim": 8,\n    "dimm": 4\n  }\n}\n')
    assert cli.main(["train-ode", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "model.dimm" in err and "line 4" in err


def test_type_errors_and_bad_json(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"distill": {"epochs": "ten"}}')
    assert cli.main(["distill", "--config", str(path)]) == 2
    assert "distill.epochs" in capsys.readouterr().err
    path.write_text('{"seed": 1,}')
    assert cli.main(["train-teacher", "--config", str(path)]) == 2
    path.write_text('{"distill": {"temperature": 0}}')
    assert cli.main(["distill", "--config", str(path)]) == 2


def test_partial_sections_keep_run_defaults():
    cfg = cli.parse_config('{"distill": {"w_jasmin": 0.2}, "model": {"dim": 32}}')
    assert (cfg.distill.epochs, cfg.distill.lr, cfg.distill.w_jasmin) == (60, 2e-3, 0.2)
    assert (cfg.model.dim, cfg.model.heads) == (32, 4)
    assert cli.parse_config(cli.default_config_json()) == cli.RunConfig()


def test_missing_inputs_exit_3(tmp_path, capsys):
    assert cli.main(["train-teacher", "--config", str(tmp_path / "nope.json")]) == 3
    cfg = tiny_config(tmp_path)
    assert cli.main(["train-teacher", "--config", str(cfg)]) == 3
    assert "train.bin" in capsys.readouterr().err
    assert cli.main(["analyze", "--config", str(cfg), "--checkpoint", str(tmp_path / "x.odev")]) == 3


def test_corrupt_checkpoint_exit_3(workspace):
    bad = workspace / "bad.odev"
    bad.write_bytes(b"ODEV\x01")
    assert cli.main(["sweep", "--config", str(tiny_config(workspace)), "--checkpoint", str(bad)]) == 3


def test_divergence_exit_4(workspace, capsys):
    cfg = tiny_config(workspace, model={"target_norm": 1e4})
    assert cli.main(["train-ode", "--config", str(cfg)]) == 4
    assert "diverged" in capsys.readouterr().err
    assert (workspace / "run" / "student_free.odev").exists()


def test_analyze_zero_block(workspace):
    save_params(workspace / "zero.odev", OdeBlockParams.zeros(8, 2, 1), patches=4)
    cfg = tiny_config(workspace)
    assert cli.main(["analyze", "--config", str(cfg), "--checkpoint", str(workspace / "zero.odev")]) == 0
    rep = json.loads((workspace / "run" / "stability.json").read_text())
    assert rep["lambda_max"] == 0.0 and rep["lyapunov_time"] == "inf"
    assert rep["bound_prop1"] == 0.0 and rep["bound_closed_form"] == 0.0


def test_pipeline(workspace):
    cfg = str(tiny_config(workspace))
    run = workspace / "run"
    assert cli.main(["train-teacher", "--config", cfg]) == 0
    assert cli.main(["distill", "--config", cfg]) == 0
    assert cli.main(["train-ode", "--config", cfg, "--out", str(workspace / "free")]) == 0
    for name in ("teacher.odev", "student.odev", "distill_log.jsonl", "contraction.csv", "contraction_table.json"):
        assert (run / name).exists(), name
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "distill" and man["schedule"]["step_indices"][-1] == 4
    assert man["config_hash"] == cli.load_config(cfg)[0].hash()
    rows = [json.loads(line) for line in (run / "distill_log.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert isinstance(models.load_model(run / "student.odev"), models.OdeViT)

    student = str(run / "student.odev")
    assert cli.main(["analyze", "--config", cfg, "--checkpoint", student, "--samples", "4"]) == 0
    assert (run / "per_class_lyapunov.csv").read_text().startswith("class,mean_lambda")
    assert cli.main(["sweep", "--config", cfg, "--checkpoint", student, "--steps", "2,4,6"]) == 0
    lines = (run / "sweep.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[2].startswith("4,")
    assert cli.main(["sweep", "--config", cfg, "--checkpoint", student, "--horizons", "0.5,1"]) == 0
    assert cli.main(["export-attn", "--config", cfg, "--checkpoint", student, "--image", "1"]) == 0
    pgm = (run / "attn_1_head0.pgm").read_bytes()
    assert pgm.startswith(b"P5\n2 2\n255\n") and len(pgm) == len(b"P5\n2 2\n255\n") + 4
    assert cli.main(["export-traj", "--config", cfg, "--checkpoint", student, "--image", "0"]) == 0
    assert len((run / "trajectory_0.csv").read_text().splitlines()) == 6
    assert cli.main(["export-traj", "--config", cfg, "--checkpoint", student, "--image", "99"]) == 2
    assert cli.main(["sweep", "--config", cfg, "--checkpoint", str(run / "teacher.odev")]) == 2


def test_seed_override_changes_log(workspace):
    cfg = str(tiny_config(workspace))
    assert cli.main(["train-teacher", "--config", cfg, "--out", str(workspace / "a")]) == 0
    assert cli.main(["train-teacher", "--config", cfg, "--out", str(workspace / "b")]) == 0
    assert cli.main(["train-teacher", "--config", cfg, "--out", str(workspace / "c"), "--seed", "5"]) == 0
    a, b, c = ((workspace / d / "teacher_log.jsonl").read_bytes() for d in "abc")
    assert a == b and a != c


def test_pgm_bytes():
    raw = cli.pgm_bytes(np.array([[0.0, 1.0], [0.5, 0.25]]))
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64])
    assert cli.pgm_bytes(np.ones((1, 2))).endswith(bytes([0, 0]))


def test_schema_and_worker_count(capsys, monkeypatch):
    assert cli.main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["model"]["N"] == 24
    monkeypatch.setenv("ODEFLOW_THREADS", "lots")
    with pytest.raises(cli.ConfigError):
        cli.worker_count()
    monkeypatch.setenv("ODEFLOW_THREADS", "1")
    assert cli.worker_count() == 1
