from pathlib import Path

import pytest
import yaml

import main
from harness import config_hash, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_tiny_config(tmp_path) -> Path:
    raw = {
        "family": "button",
        "approach": "TacManual",
        "seeds": [0],
        "budget": 8,
        "sim": {"horizon": 3},
        "ctrlgen": {"manual_file": str(CONFIGS / "manual" / "button.yaml")},
        "ppo": {"num_envs": 2, "num_steps": 4, "minibatches": 2, "epochs": 1, "hidden": [8]},
        "eval": {"n_variations": 2},
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_parse_args_defaults():
    args = main.parse_args(["train-policy", "--config", "configs/button.yaml"])
    assert args.out == "runs"
    assert args.seed is None
    assert args.override == []


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main.parse_args(["fly", "--config", "x.yaml"])


def test_missing_config_exits_with_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        main.main(["train-policy", "--config", str(tmp_path / "nope.yaml")])
    assert info.value.code == 1


def test_eval_without_policy_exits(tmp_path):
    config = write_tiny_config(tmp_path)
    with pytest.raises(SystemExit) as info:
        main.main(["eval", "--config", str(config), "--out", str(tmp_path / "runs")])
    assert info.value.code == 1


def test_train_then_eval(tmp_path):
    config = write_tiny_config(tmp_path)
    out = tmp_path / "runs"
    main.main(["train-policy", "--config", str(config), "--out", str(out)])
    main.main(["eval", "--config", str(config), "--out", str(out)])
    run_dir = out / config_hash(load_config(config)) / "0"
    assert (run_dir / "metrics" / "policy.csv").exists()
    summary = yaml.safe_load((run_dir / "metrics" / "eval.yaml").read_text())
    assert summary["episodes"] == 2
    main.main(["emit-plots", "--config", str(config), "--out", str(out)])
    assert (out / config_hash(load_config(config)) / "plots" / "policy_success_ratio.png").exists()
