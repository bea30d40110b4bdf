import json
import math
import subprocess
import sys

import numpy as np
import pytest

from evop.cli import main
from evop.dynamics import Trajectory, save_trajectory, stationary_distribution
from evop.operator import EvolutionOperatorModel, load_operator, save_operator

from .conftest import TWO_STATE


def write_config(path, text):
    path.write_text(text)
    return str(path)


SMALL_MARKOV = """
preset: markov
dynamics: {n_steps: 6000, splits: [4000, 900, 900], gap: 0}
training: {epochs: 2, batch_size: 256}
"""


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "evop", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("generate", "train", "evaluate", "spectrum", "interpret"):
        assert cmd in proc.stdout


def test_unknown_subcommand_exits_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 1


def test_batch_size_one_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", "training: {batch_size: 1}\n")
    assert main(["train", "--config", cfg, "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "batch_size" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_key_named(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", "encoder: {latent_dims: 4}\n")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "encoder.latent_dims" in capsys.readouterr().err


def test_generate_lorenz_protocol_and_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["generate", "--out", str(out), "--seed", "2"]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["splits"] == {"train": [1000, 11000], "val": [12000, 13000], "test": [14000, 15000]}
    for name in ("trajectory.bin", "train.bin", "val.bin", "test.bin", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    from evop.dynamics import load_trajectory
    assert len(load_trajectory(a / "trajectory.bin")) == 15001
    assert len(load_trajectory(a / "train.bin")) == 10000


def test_spectrum_diagonal_operator(tmp_path):
    save_operator(tmp_path / "op.json", EvolutionOperatorModel(np.diag([0.5, 0.9]), ridge=0.0, lag_time=1.0))
    assert main(["spectrum", "--operator", str(tmp_path / "op.json"), "--out", str(tmp_path)]) == 0
    rows = [r.split(",") for r in (tmp_path / "spectrum.csv").read_text().splitlines()[1:]]
    assert [float(r[1]) for r in rows] == [0.9, 0.5]
    assert float(rows[0][4]) == pytest.approx(-1 / math.log(0.9))
    assert float(rows[1][4]) == pytest.approx(1 / math.log(2))
    assert (tmp_path / "spectrum.png").exists()


def test_identity_operator_on_constant_data(tmp_path):
    save_trajectory(Trajectory(np.tile([1.0, -2.0, 3.0], (30, 1))), tmp_path / "c.csv")
    save_operator(tmp_path / "op.json", EvolutionOperatorModel(np.eye(4), ridge=0.0))
    cfg = write_config(tmp_path / "c.yaml", "operator: {lag: 1}\n")
    assert main(["evaluate", "--config", cfg, "--operator", str(tmp_path / "op.json"),
                 "--data", str(tmp_path / "c.csv"), "--out", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["rmse"] == 0.0


def test_markov_baseline_matches_chain_oracle(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "preset: markov\ndynamics: {n_steps: 200000, "
                                           "splits: [100000, 50000, 50000]}\n")
    data = tmp_path / "data"
    assert main(["generate", "--config", cfg, "--out", str(data)]) == 0
    assert main(["evaluate", "--config", cfg, "--baseline", "--data", str(data), "--out", str(tmp_path)]) == 0
    got = json.loads((tmp_path / "metrics.json").read_text())["linls_rmse"]
    pi = stationary_distribution(TWO_STATE)
    # best predictor of the one-hot next state is the row T(x, .)
    oracle = math.sqrt(sum(pi[x] * sum(TWO_STATE[x, j] * (1 - TWO_STATE[x, j]) for j in range(2))
                           for x in range(2)) / 2)
    assert got == pytest.approx(oracle, abs=0.01)


def test_train_resume_continues_numbering(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL_MARKOV)
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(data)]) == 0
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(run), "--no-figures"]) == 0
    assert load_operator(run / "operator.json").dim == 4  # 2 latent + 2 raw
    cfg4 = write_config(tmp_path / "c4.yaml", SMALL_MARKOV.replace("epochs: 2", "epochs: 4"))
    assert main(["train", "--config", cfg4, "--data", str(data), "--out", str(run),
                 "--resume", str(run / "checkpoint.json")]) == 0
    epochs = [json.loads(l)["epoch"] for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert epochs == [1, 2, 3, 4]
    assert (run / "training.png").exists()
    assert json.loads((run / "train_report.json").read_text())["epochs"] == 4


def test_missing_data_is_runtime_or_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert main(["evaluate", "--operator", str(tmp_path / "missing.json"), "--data",
                 str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) in (1, 2)


def test_corrupt_file_exits_two(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n3,nan\n")
    save_operator(tmp_path / "op.json", EvolutionOperatorModel(np.eye(3), ridge=0.0))
    code = main(["evaluate", "--operator", str(tmp_path / "op.json"), "--data", str(tmp_path / "bad.csv"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "row 2, column 1" in capsys.readouterr().err


def test_spectrum_and_interpret_chain(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", "preset: ou\ndynamics: {n_steps: 4000, splits: [3000, 500, 500]}\n"
                                           "training: {epochs: 2}\ninterpret: {n_lambdas: 10}\n")
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["generate", "--config", cfg, "--out", str(data), "--no-figures"]) == 0
    assert main(["train", "--config", cfg, "--data", str(data), "--out", str(run), "--no-figures"]) == 0
    assert main(["spectrum", "--config", cfg, "--operator", str(run / "operator.json"), "--checkpoint",
                 str(run / "checkpoint.json"), "--data", str(data), "--n-modes", "2", "--out", str(run)]) == 0
    assert main(["evaluate", "--config", cfg, "--operator", str(run / "operator.json"), "--checkpoint",
                 str(run / "checkpoint.json"), "--data", str(data), "--out", str(run)]) == 0
    metrics = json.loads((run / "metrics.json").read_text())
    assert "rmse" not in metrics and metrics["vamp2"] > 1.0  # no raw passthrough in the ou preset
    lines = (run / "eigenfunction_2.csv").read_text().splitlines()
    assert lines[0] == "time_index,re,im" and len(lines) == 501
    assert (run / "eigenfunction_2.png").exists()
    assert main(["interpret", "--config", cfg, "--eigenfunction", str(run / "eigenfunction_2.csv"),
                 "--data", str(data), "--out", str(run)]) == 0
    assert (run / "lasso_path.csv").read_text().splitlines()[0] == "lambda,mse,n_active,x0,x0^2"
    doc = json.loads((run / "coefficients.json").read_text())
    assert doc["coefficients"] and abs(sum(abs(c["coefficient"]) for c in doc["coefficients"]) - 1) < 1e-12
