import subprocess
import sys

import numpy as np
import pytest

from cida.cli import main
from cida.datasets import gen_circle, write_csv
from cida.trainer import ExperimentConfig, load_checkpoint


def test_generate(tmp_path, capsys):
    out = tmp_path / "d.csv"
    assert main(["generate", "--dataset", "circle", "--seed", "0", "--n", "100", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 3001 and lines[0] == "x1,x2,u1,y,split"


@pytest.mark.parametrize(
    "argv",
    [[], ["train"], ["bogus"], ["generate", "--dataset", "moons", "--out", "x"], ["oracle", "--suite", "lemmata"],
     ["eval", "--ckpt", "a", "--data", "b", "--out", "c", "--extra"]],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "boundary" in capsys.readouterr().out


def test_missing_files_are_data_errors(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 2
    assert main(["eval", "--ckpt", str(tmp_path / "c"), "--data", str(tmp_path / "d"), "--out", "o"]) == 2


def test_bad_config_key(tmp_path):
    (tmp_path / "c.cfg").write_text("lamda = 1\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg")]) == 2


@pytest.fixture
def trained(tmp_path):
    data = tmp_path / "data.csv"
    write_csv(gen_circle(0, 8), data)
    cfg = ExperimentConfig(
        dataset_name="circle", dataset_path=str(data), method="cida", iterations=100, out_dir=str(tmp_path / "runs")
    )
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    assert main(["train", "--config", str(tmp_path / "c.cfg")]) == 0
    return tmp_path, tmp_path / "runs" / "circle-cida-seed0" / "checkpoint.txt", data


def test_train_eval_probe_boundary(trained, capsys):
    root, ckpt, data = trained
    assert load_checkpoint(ckpt).method == "cida"
    assert (ckpt.parent / "history.csv").read_text().startswith("iteration,V_p,V_d\n100,")

    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--out", str(root / "acc.csv")]) == 0
    assert "target accuracy" in capsys.readouterr().out
    assert len((root / "acc.csv").read_text().splitlines()) == 1 + 30 + 2

    assert main(["probe", "--ckpt", str(ckpt), "--data", str(data), "--out", str(root / "p.csv")]) == 0
    assert (root / "p.csv").read_text().startswith("dim,r2\n")

    out = root / "b.csv"
    assert main(["boundary", "--ckpt", str(ckpt), "--u", "7", "--grid", "-12:12:-12:12:3", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "x1,x2,u,pred,prob1" and len(rows) == 10
    assert all(0 <= float(r.split(",")[-1]) <= 1 for r in rows[1:])

    assert main(["boundary", "--ckpt", str(ckpt), "--u", "7", "--grid", "1:2:3", "--out", str(out)]) == 2
    assert main(["boundary", "--ckpt", str(ckpt), "--u", "7,8", "--grid", "0:1:0:1:2", "--out", str(out)]) == 2


def test_numeric_failure_exit_code(tmp_path):
    data = gen_circle(0, 3)
    data.x[:] = np.nan
    write_csv(data, tmp_path / "nan.csv")
    cfg = ExperimentConfig(dataset_path=str(tmp_path / "nan.csv"), iterations=3, out_dir=str(tmp_path))
    (tmp_path / "c.cfg").write_text(cfg.to_text())
    # the CSV reader rejects non-finite values before training starts
    assert main(["run", "--config", str(tmp_path / "c.cfg")]) == 2


def test_divergence_maps_to_three(tmp_path, monkeypatch):
    from cida import cli
    from cida.trainer import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("iteration 7: non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    (tmp_path / "c.cfg").write_text("iterations = 10\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg")]) == 3


def test_run_bundle(tmp_path, capsys):
    cfg = ExperimentConfig(dataset_name="sine", method="source-only", iterations=100, n_per_domain=5,
                           n_eval_per_domain=5, out_dir=str(tmp_path))
    (tmp_path / "r.cfg").write_text(cfg.to_text())
    assert main(["run", "--config", str(tmp_path / "r.cfg")]) == 0
    assert (tmp_path / "sine-source-only-seed0" / "accuracy.csv").exists()


def test_gradcheck(capsys):
    assert main(["gradcheck", "--points", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)


def test_oracle_all_subprocess():
    proc = subprocess.run([sys.executable, "-m", "cida", "oracle", "--suite", "all"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout[-2000:] + proc.stderr
    lines = proc.stdout.splitlines()
    checks = [l for l in lines if l.startswith(("PASS", "FAIL"))]
    assert checks and all(l.startswith("PASS") for l in checks)


def test_oracle_failure_exit_code(monkeypatch, capsys):
    from cida import cli
    from cida.oracle import Report

    rep = Report()
    rep.add("forced", 1.0, 2.0)
    monkeypatch.setattr(cli, "run_suite", lambda name: rep)
    assert main(["oracle", "--suite", "lemmas"]) == 4
    assert "FAIL forced" in capsys.readouterr().out
