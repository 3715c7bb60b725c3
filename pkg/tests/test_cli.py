import json
import subprocess
import sys

from flaggnn.cli import main


def test_run_writes_outputs(tmp_path, toy_config, capsys):
    assert main(["run", "--config", str(toy_config), "--out", str(tmp_path / "o"), "--set", "epochs=4"]) == 0
    assert "selected epoch" in capsys.readouterr().out
    summary = json.loads((tmp_path / "o/summary.json").read_text())
    assert summary["epochs"] == 4 and summary["strategy"] == "flag"


def test_compare_and_noise_sweep(tmp_path, toy_config, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(toy_config), "--out", str(out), "--seeds", "0..1",
                 "--set", "epochs=3"]) == 0
    assert (out / "table.csv").read_text().count("\n") == 6
    out = tmp_path / "noise"
    assert main(["noise-sweep", "--config", str(toy_config), "--out", str(out), "--sigmas", "0,1",
                 "--set", "epochs=3"]) == 0
    assert "fgsm-clean gap" in capsys.readouterr().out


def test_free_budget_verb(tmp_path, toy_config):
    assert main(["free-budget", "--config", str(toy_config), "--out", str(tmp_path), "--set", "epochs=6"]) == 0


def test_config_error_exit_code(tmp_path, toy_config, capsys):
    assert main(["run", "--config", str(toy_config), "--out", str(tmp_path), "--set", "bogus=1"]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 1
    assert main(["sweep-seeds", "--config", str(toy_config), "--out", str(tmp_path), "--seeds", "x"]) == 1


def test_dataset_error_exit_code(tmp_path, toy_config):
    (toy_config.parent / "edges.txt").write_text("3 1\n0 zz\n")
    assert main(["run", "--config", str(toy_config), "--out", str(tmp_path)]) == 2
    (toy_config.parent / "edges.txt").unlink()
    assert main(["run", "--config", str(toy_config), "--out", str(tmp_path)]) == 2


def test_divergence_exit_code(tmp_path, toy_config, capsys):
    code = main(["run", "--config", str(toy_config), "--out", str(tmp_path), "--set", "alpha_l=1e308"])
    assert code == 3
    assert "diverged" in capsys.readouterr().err


def test_make_dataset_then_run(tmp_path):
    d = tmp_path / "ds"
    assert main(["make-dataset", "toy", "--out", str(d)]) == 0
    assert main(["run", "--config", str(d / "config.ini"), "--out", str(tmp_path / "r"),
                 "--set", "epochs=2"]) == 0


def test_module_entry_point(tmp_path, toy_config):
    proc = subprocess.run([sys.executable, "-m", "flaggnn", "run", "--config", str(toy_config),
                           "--out", str(tmp_path), "--set", "epochs=2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
