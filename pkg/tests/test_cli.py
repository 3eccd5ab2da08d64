import subprocess
import sys

import pytest
import yaml

from pamoe.cli import main

TINY = {"training": {"total_env_steps": 150, "groups_per_batch": 1, "eval_episodes": 2,
                     "warmup_episodes": 4, "warmup_updates": 3, "seeds": [0],
                     "checkpoint": False},
        "algorithm": {"n_group": 4}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def test_train_uses_env_output_root(cfg_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PAMOE_OUTPUT_ROOT", str(tmp_path / "out"))
    assert main(["train", "--config", str(cfg_file), "--name", "t"]) == 0
    assert (tmp_path / "out" / "t" / "seed0" / "summary.json").exists()
    assert "seed 0: success" in capsys.readouterr().out
    assert main(["report", str(tmp_path / "out" / "t")]) == 0


def test_single_adapter_override(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--set", "policy.K=0",
                 "--out", str(tmp_path), "--name", "k0"]) == 0


@pytest.mark.parametrize("argv", [
    ["train", "--set", "policy.K=-1"],
    ["train", "--set", "routing=sideways"],
    ["train", "--set", "nosuch.key=1"],
    ["train", "--config", "/does/not/exist.yaml"],
    ["train", "--seeds", "a,b"],
    ["report"],
])
def test_config_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + (["--out", str(tmp_path)] if argv[0] == "train" else [])) == 2
    assert "error" in capsys.readouterr().err


def test_numerical_abort_exits_3(cfg_file, tmp_path, monkeypatch):
    import numpy as np
    from pamoe import training
    real = training.compute_advantages

    def poisoned(batch, cfg):
        A = real(batch, cfg)
        A[0] = np.nan
        return A
    monkeypatch.setattr(training, "compute_advantages", poisoned)
    assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path), "--name", "nan"]) == 3
    assert (tmp_path / "nan" / "seed0" / "nan_dump.json").exists()


def test_module_entry_point_selfcheck():
    proc = subprocess.run([sys.executable, "-m", "pamoe", "selfcheck", "--cases", "2"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "PASS  gradient isolation" in proc.stdout
