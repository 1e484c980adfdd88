import csv
import json
import subprocess
import sys

import pytest

from s2o import cli
from s2o.config import load_config

SMALL = """
seed = 3
out = "{out}"

[dataset]
kind = "blobs"
per_class = 40

[model]
hidden = [16]

[train]
epochs = 2
batch_size = 32
checkpoint_every = 1

[train.attack]
norm = "linf"
epsilon = 0.03137254901960784
step_size = 0.00784313725490196
iterations = 3

[estimate]
estimator = "laplace"
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL.format(out=(tmp_path / "run").as_posix()))
    return path


def _run(*argv):
    return subprocess.run([sys.executable, "-m", "s2o", *argv], capture_output=True, text=True)


def test_config_overrides(small_config):
    cfg = load_config(small_config, {"seed": 9, "out": None})
    assert cfg.seed == 9 and cfg.train.seed == 9
    assert cfg.train.epochs == 2 and cfg.hidden == [16]
    assert cfg.config_hash() != load_config(small_config).config_hash()


def test_config_hash_ignores_out(small_config):
    a = load_config(small_config, {"out": "x"})
    b = load_config(small_config, {"out": "y"})
    assert a.config_hash() == b.config_hash()


def test_missing_idx_path_rejected(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text('[dataset]\nkind = "idx"\nimage_path = "nope"\nlabel_path = "nope"\n')
    with pytest.raises(FileNotFoundError):
        load_config(p)


def test_train_then_bound_finite(small_config, tmp_path, capsys):
    assert cli.main(["train", "--config", str(small_config)]) == 0
    run = tmp_path / "run"
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert all(0 <= float(r["clean_acc"]) <= 1 for r in rows)
    meta = json.loads((run / "metrics.csv.meta.json").read_text())
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 64
    assert {"vec_order", "sigma_convention", "c1", "c2"} <= set(meta["conventions"])
    assert (run / "checkpoints" / "final.s2ow").exists()
    assert "wall_time" in json.loads((run / "timings.json").read_text())
    capsys.readouterr()

    assert cli.main(["bound", "--config", str(small_config)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["all_finite"]
    report = json.loads((run / "bound_report.json").read_text())
    assert report["complexity"] == out["complexity"]

    assert cli.main(["attack-eval", "--config", str(small_config)]) == 0
    res = json.loads((run / "attack_eval.json").read_text())
    assert res["pgd20"] <= res["clean"]

    assert cli.main(["estimate", "--config", str(small_config)]) == 0
    assert (run / "estimates" / "laplace_clean.json").exists()


def test_bound_without_checkpoint_errors_json(tmp_path, capsys):
    code = cli.main(["bound", "--out", str(tmp_path / "empty")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "CliError" and "checkpoint" in err["message"]


def test_simulate_row_count(tmp_path, capsys):
    assert cli.main(["simulate", "--dim", "9", "--count", "25", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "scatter_dim9.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 26
    assert (tmp_path / "scatter_dim9.csv.meta.json").exists()
    out = json.loads(capsys.readouterr().out)
    assert out["trend_checks_pass"]


def test_simulate_bad_dim_errors(tmp_path, capsys):
    assert cli.main(["simulate", "--dim", "10", "--count", "2", "--out", str(tmp_path)]) == 1
    assert "perfect square" in json.loads(capsys.readouterr().err)["message"]


def test_gradcheck_exit_zero(tmp_path):
    proc = _run("gradcheck", "--cases", "10", "--out", str(tmp_path))
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"]
    assert "PASS" in proc.stdout


def test_unknown_subcommand_usage():
    proc = _run("frobnicate")
    assert proc.returncode != 0
    assert "usage" in proc.stderr


def test_unknown_flag_usage():
    proc = _run("simulate", "--bogus", "1")
    assert proc.returncode != 0
    assert "usage" in proc.stderr


@pytest.mark.parametrize("dim", [4, 16, 25])
def test_simulate_other_dims(tmp_path, dim, capsys):
    assert cli.main(["simulate", "--dim", str(dim), "--count", "5", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["trend_checks_pass"]
