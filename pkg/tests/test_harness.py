import copy
from pathlib import Path

import numpy as np
import pytest
import yaml

import harness
from harness import (
    EVAL_COLUMNS,
    POLICY_COLUMNS,
    Approach,
    ConfigError,
    EvalReport,
    StageError,
    build_config,
    config_hash,
    controller_count,
    emit_outputs,
    emit_plots,
    eval_generalization,
    eval_variation_seeds,
    load_config,
    load_policy_stage,
    make_actions,
    make_policy,
    run_experiment,
    run_paths,
    stage_learn_keypoints,
    stage_train_descriptors,
    stage_train_policy,
    write_eval_report,
)
from rl import EVAL_SEED_RANGE, GaussianPolicy, TaskPolicy
from sim import TaskFamily
from visualizer import read_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "family": "button",
    "approach": "TacKeypointsAxes",
    "seeds": [0],
    "budget": 8,
    "sim": {"horizon": 3},
    "ctrlgen": {"keypoint_source": "semantic"},
    "ppo": {"num_envs": 2, "num_steps": 4, "minibatches": 2, "epochs": 1, "hidden": [8]},
    "eval": {"n_variations": 2},
}


def tiny_config(**sections):
    raw = copy.deepcopy(TINY)
    for key, value in sections.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return build_config(raw)


@pytest.mark.parametrize("name", ["button", "block", "door", "ee_space_button", "learn_keypoints_block"])
def test_shipped_configs_load(name):
    config = load_config(CONFIGS / f"{name}.yaml")
    assert isinstance(config.family, TaskFamily)
    assert config.total_steps > 0


def test_button_config():
    config = load_config(CONFIGS / "button.yaml")
    assert config.family is TaskFamily.BUTTON
    assert config.approach is Approach.TAC_MANUAL
    assert config.total_steps == 200_000
    assert config.effective_ppo().total_steps == 200_000


def test_door_defaults_from_file():
    config = load_config(CONFIGS / "door.yaml")
    assert config.sim.horizon == 240
    assert config.ppo.entropy_coef == pytest.approx(0.1)
    assert config.ppo.entropy_coef_final == pytest.approx(0.01)


def test_overrides():
    config = load_config(CONFIGS / "button.yaml", ["ppo.lr=0.001", "seeds=2", "render.width=32"])
    assert config.ppo.lr == pytest.approx(0.001)
    assert config.seeds == (0, 1)
    assert config.render.width == 32
    with pytest.raises(ConfigError):
        load_config(CONFIGS / "button.yaml", ["ppo.lr"])


@pytest.mark.parametrize(
    "override",
    ["ppo.unknown=1", "colour=red", "ppo.epochs=abc", "ppo.epochs=2.5", "ppo.clip=2", "sim.use_pid=3", "family=drawer", "budget=-5"],
)
def test_invalid_config(override):
    with pytest.raises(ConfigError):
        load_config(CONFIGS / "button.yaml", [override])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_config_hash_is_stable():
    a = load_config(CONFIGS / "button.yaml")
    b = load_config(CONFIGS / "button.yaml")
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    assert config_hash(load_config(CONFIGS / "button.yaml", ["ppo.lr=0.001"])) != config_hash(a)


def test_run_layout(tmp_path):
    config = tiny_config()
    paths = run_paths(config, tmp_path, 3)
    assert paths.run_dir == tmp_path / config_hash(config) / "3"
    for d in (paths.checkpoints, paths.metrics, paths.plots):
        assert d.is_dir()
    record = yaml.safe_load((tmp_path / config_hash(config) / "config.yaml").read_text())
    assert record["config"]["family"] == "button"


@pytest.mark.parametrize("approach", ["TacManual", "TacKeypoints"])
def test_manual_approaches_need_manual_file(approach):
    with pytest.raises(ConfigError, match="manual_file"):
        tiny_config(approach=approach)
    with pytest.raises(ConfigError):
        load_config(CONFIGS / "button.yaml", ["ctrlgen.manual_file=null"])


def test_missing_manual_file_is_a_stage_error(tmp_path):
    config = tiny_config(approach="TacManual", ctrlgen={"manual_file": str(tmp_path / "nope.yaml")})
    with pytest.raises(StageError) as info:
        make_actions(config)
    assert info.value.stage == "train-policy"


def test_descriptors_need_dataset(tmp_path):
    config = tiny_config(ctrlgen={"keypoint_source": "descriptors"})
    with pytest.raises(StageError) as info:
        stage_train_descriptors(config, run_paths(config, tmp_path, 0))
    assert info.value.stage == "gen-data"


def test_descriptor_approach_needs_model(tmp_path):
    config = tiny_config(ctrlgen={"keypoint_source": "descriptors"})
    with pytest.raises(StageError) as info:
        make_actions(config, run_paths(config, tmp_path, 0))
    assert info.value.stage == "train-descriptors"


def test_missing_policy_checkpoint(tmp_path):
    config = tiny_config()
    paths = run_paths(config, tmp_path, 0)
    with pytest.raises(StageError) as info:
        load_policy_stage(config, paths)
    assert info.value.stage == "train-policy"
    with pytest.raises(StageError):
        stage_learn_keypoints(config, paths)


def test_keypoint_axes_controller_count():
    config = tiny_config()
    assert controller_count(config, make_actions(config), 0) == 14


def test_manual_controller_count():
    config = tiny_config(approach="TacManual", ctrlgen={"manual_file": "configs/manual/button.yaml"})
    assert controller_count(config, make_actions(config), 0) == 5


def test_eval_variation_seeds():
    seeds = eval_variation_seeds(15, 2021)
    assert seeds == eval_variation_seeds(15, 2021)
    assert len(set(seeds)) == 15
    assert all(EVAL_SEED_RANGE[0] <= s < EVAL_SEED_RANGE[1] for s in seeds)
    assert seeds != eval_variation_seeds(15, 2022)


def test_eval_covers_every_seed_and_variation(tmp_path):
    config = tiny_config(seeds=[0, 1, 2, 3, 4], eval={"n_variations": 15}, sim={"horizon": 2})
    policies = {s: make_policy(config, 14, s) for s in config.seeds}
    report = eval_generalization(policies, config)
    assert len(report.records) == 75
    assert sorted(report.per_seed) == [0, 1, 2, 3, 4]
    assert 0.0 <= report.mean <= 1.0
    write_eval_report(report, tmp_path)
    rows = read_csv(tmp_path / "eval.csv")
    assert len(rows) == 75
    assert list(rows[0]) == EVAL_COLUMNS
    assert EVAL_COLUMNS[-1] == "config_hash"
    lines = (tmp_path / "eval.csv").read_text().splitlines()[1:]
    assert all(line.endswith("," + config_hash(config)) for line in lines)
    summary = yaml.safe_load((tmp_path / "eval.yaml").read_text())
    assert summary["episodes"] == 75


def test_zero_command_policy_never_opens_door():
    config = tiny_config(family="door", approach="EESpace", sim={"horizon": 5})
    policy = make_policy(config, 7, 0)
    assert isinstance(policy, GaussianPolicy)
    for key, value in policy.parameters().items():
        if key.startswith("policy/"):
            value[...] = 0.0
    report = eval_generalization(policy, config, n_variations=3, seeds=[0])
    assert report.mean == 0.0
    assert all(r["steps"] == 5 for r in report.records)


def test_eval_report_statistics():
    records = [
        dict(seed=0, variation_seed=1, success=True),
        dict(seed=0, variation_seed=2, success=False),
        dict(seed=1, variation_seed=1, success=True),
        dict(seed=1, variation_seed=2, success=True),
    ]
    report = EvalReport.from_records(records)
    assert report.per_seed == {0: 0.5, 1: 1.0}
    assert report.mean == pytest.approx(0.75)
    assert report.std == pytest.approx(0.25)


def test_empty_metrics_give_header_only_csv(tmp_path):
    written = emit_outputs({0: []}, tmp_path)
    assert written == [tmp_path / "0" / "metrics" / "policy.csv"]
    assert written[0].read_text() == ",".join(POLICY_COLUMNS) + "\n"
    assert emit_plots(tmp_path) is None


def test_reemitting_is_bit_identical(tmp_path):
    runs = {
        s: [dict(update=i, steps=8 * (i + 1), success_ratio=0.1 * i * (s + 1), mean_reward=-1.0) for i in range(4)]
        for s in (0, 1)
    }
    first = emit_outputs(runs, tmp_path / "a")
    second = emit_outputs(runs, tmp_path / "b")
    for a, b in zip(first, second):
        if a.suffix == ".csv":
            assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "plots" / "policy_success_ratio.png").exists()
    assert emit_plots(tmp_path / "a") == tmp_path / "a" / "plots" / "policy_success_ratio.png"


def test_ee_space_builds_no_controller_sets(tmp_path, monkeypatch):
    def forbidden(*args, **kwargs):
        raise AssertionError("controller generation called for EE-Space")

    monkeypatch.setattr(harness, "generate_controllers", forbidden)
    monkeypatch.setattr(harness, "resolve_manual_controllers", forbidden)
    monkeypatch.setattr(harness, "extract_candidate_axes", forbidden)
    config = tiny_config(approach="EESpace")
    policy, rows = stage_train_policy(config, run_paths(config, tmp_path, 0))
    assert isinstance(policy, GaussianPolicy)
    assert policy.action_size == 7
    assert len(rows) == 1
    assert load_policy_stage(config, run_paths(config, tmp_path, 0)).digest() == policy.digest()


def test_train_policy_writes_metrics(tmp_path):
    config = tiny_config(budget=16)
    paths = run_paths(config, tmp_path, 0)
    policy, rows = stage_train_policy(config, paths)
    assert isinstance(policy, TaskPolicy)
    assert [r["update"] for r in rows] == [0, 1]
    csv_rows = read_csv(paths.metrics / "policy.csv")
    assert len(csv_rows) == 2
    assert config_hash(config) in (paths.metrics / "policy.csv").read_text()
    assert list(csv_rows[0]) == POLICY_COLUMNS


def test_experiment_is_deterministic(tmp_path):
    config = tiny_config()
    a = run_experiment(config, tmp_path / "a")
    b = run_experiment(config, tmp_path / "b")
    assert a.metrics == b.metrics
    csv_a = a.root / "0" / "metrics" / "policy.csv"
    assert csv_a.read_bytes() == (b.root / "0" / "metrics" / "policy.csv").read_bytes()
    assert a.policies[0].digest() == b.policies[0].digest()
    assert a.report.mean == b.report.mean
    assert len(a.report.records) == 2
    assert (a.root / "eval" / "eval.yaml").exists()
    assert np.array_equal(
        [r["episode_return"] for r in a.report.records],
        [r["episode_return"] for r in b.report.records],
    )
