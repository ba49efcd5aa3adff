"""
Experiment orchestration: configuration, the compared approaches, per-stage pipelines,
generalization evaluation and metric/plot emission.

Runs are written to <out>/<config hash>/<seed>/{checkpoints,metrics,plots}. Stages that
need an artifact produced by an earlier stage raise StageError naming that stage.
"""

import enum
import hashlib
import logging
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import yaml

from common import ensure_dir, make_rng
from controllers import Gains
from ctrlgen import (
    ControllerGenerationError,
    extract_candidate_axes,
    generate_controllers,
    load_manual_set,
    resolve_manual_controllers,
)
from descriptors import (
    DescriptorConfig,
    DescriptorModel,
    KeypointError,
    choose_reference_view,
    load_annotation,
    locate_keypoints,
    save_annotation,
    train_descriptors,
)
from keypointlearn import KeypointLearnConfig, KeypointLearner, KeypointNet
from render import RenderConfig, load_dataset, render_view, sample_cameras, scene_focus, write_dataset
from rl import (
    ENV_FAULTS,
    EVAL_SEED_RANGE,
    METRIC_COLUMNS,
    ActorCritic,
    ControllerActions,
    EESpaceActions,
    GaussianPolicy,
    PpoConfig,
    TaskPolicy,
    VectorEnv,
    load_policy,
    run_episode,
    train_policy,
)
from sim import OBSERVATION_SIZES, SimConfig, TaskEnv, TaskFamily, sample_variation
from visualizer import (
    LoggingTrainingObserver,
    MetricsCsvObserver,
    ObserverGroup,
    plot_learning_curves,
    read_csv,
    write_csv,
)

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
DEFAULT_BUDGETS = {TaskFamily.BUTTON: 200_000, TaskFamily.BLOCK: 500_000, TaskFamily.DOOR: 2_000_000}
POLICY_COLUMNS = METRIC_COLUMNS + ["episodes", "dropped", "eval_success", "config_hash"]
KEYPOINT_COLUMNS = ["iteration", "mean_return", "success_ratio", "entropy", "lr", "invalid", "config_hash"]
EVAL_COLUMNS = ["seed", "variation_seed", "success", "episode_return", "steps", "config_hash"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


class Approach(str, enum.Enum):
    EE_SPACE = "EESpace"
    TAC_MANUAL = "TacManual"
    TAC_KEYPOINTS = "TacKeypoints"
    TAC_KEYPOINTS_AXES = "TacKeypointsAxes"

    @property
    def uses_descriptors(self) -> bool:
        return self in (Approach.TAC_KEYPOINTS, Approach.TAC_KEYPOINTS_AXES)


@dataclass(frozen=True)
class ControllerConfig:
    kp: float = 1.0
    kd: float = 0.1
    ki: float = 0.0
    force_magnitude: float = 5.0

    def gains(self) -> Gains:
        return Gains(self.kp, self.kd, self.ki)


@dataclass(frozen=True)
class CtrlGenConfig:
    include_global_axes: bool = False
    manual_file: Optional[str] = None
    keypoint_source: str = "descriptors"
    keypoint_indices: Optional[tuple] = None

    def __post_init__(self):
        if self.keypoint_source not in ("descriptors", "semantic"):
            raise ValueError(f"keypoint_source must be 'descriptors' or 'semantic', got {self.keypoint_source!r}")


@dataclass(frozen=True)
class EESpaceConfig:
    log_std_init: float = -0.5


@dataclass(frozen=True)
class EvalConfig:
    n_variations: int = 15
    seed: int = 2021
    eval_every: int = 0
    training_variations: int = 5


@dataclass(frozen=True)
class PathsConfig:
    dataset: Optional[str] = None
    descriptor_checkpoint: Optional[str] = None
    annotation: Optional[str] = None
    policy_checkpoint: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    family: TaskFamily
    approach: Approach
    seeds: tuple = (0, 1, 2, 3, 4)
    budget: Optional[int] = None
    sim: SimConfig = field(default_factory=SimConfig)
    controllers: ControllerConfig = field(default_factory=ControllerConfig)
    ctrlgen: CtrlGenConfig = field(default_factory=CtrlGenConfig)
    render: RenderConfig = field(default_factory=lambda: RenderConfig(width=64, height=64))
    descriptors: DescriptorConfig = field(default_factory=DescriptorConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    ee_space: EESpaceConfig = field(default_factory=EESpaceConfig)
    keypointlearn: KeypointLearnConfig = field(default_factory=KeypointLearnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def total_steps(self) -> int:
        return int(self.budget) if self.budget is not None else DEFAULT_BUDGETS[self.family]

    def effective_ppo(self) -> PpoConfig:
        return replace(self.ppo, total_steps=self.total_steps)


SECTIONS = {
    "sim": SimConfig,
    "controllers": ControllerConfig,
    "ctrlgen": CtrlGenConfig,
    "render": RenderConfig,
    "descriptors": DescriptorConfig,
    "ppo": PpoConfig,
    "ee_space": EESpaceConfig,
    "keypointlearn": KeypointLearnConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}
SECTION_DEFAULTS = {"render": {"width": 64, "height": 64}}


def _coerce(key: str, default, value):
    if value is None or default is None:
        return tuple(value) if isinstance(value, list) else value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)):
        try:
            number = float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from e
        if isinstance(default, float):
            return number
        if number != int(number):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(number)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_section(cls, raw, prefix: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {prefix}.{key}")
    kwargs = {}
    for key, value in raw.items():
        default = known[key].default
        kwargs[key] = _coerce(f"{prefix}.{key}", None if default is MISSING else default, value)
    try:
        return cls(**kwargs)
    except (ValueError, RuntimeError, TypeError) as e:
        raise ConfigError(f"{prefix}: {e}") from e


def build_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key}")
    try:
        family = TaskFamily(raw.get("family"))
    except ValueError as e:
        raise ConfigError(f"family: unknown task family {raw.get('family')!r}") from e
    try:
        approach = Approach(raw.get("approach"))
    except ValueError as e:
        raise ConfigError(f"approach: unknown approach {raw.get('approach')!r}") from e
    kwargs = {"family": family, "approach": approach}
    if "seeds" in raw:
        seeds = raw["seeds"]
        if isinstance(seeds, int):
            seeds = list(range(seeds))
        if not seeds:
            raise ConfigError("seeds: at least one seed is required")
        kwargs["seeds"] = tuple(int(s) for s in seeds)
    if raw.get("budget") is not None:
        kwargs["budget"] = _coerce("budget", 0, raw["budget"])
        if kwargs["budget"] <= 0:
            raise ConfigError("budget must be positive")
    for name, cls in SECTIONS.items():
        section = dict(SECTION_DEFAULTS.get(name, {}))
        section.update(raw.get(name) or {})
        kwargs[name] = _build_section(cls, section, name)
    if approach in (Approach.TAC_MANUAL, Approach.TAC_KEYPOINTS) and not kwargs["ctrlgen"].manual_file:
        raise ConfigError(f"ctrlgen.manual_file is required for {approach.value}")
    return ExperimentConfig(**kwargs)


def apply_override(raw: dict, override: str) -> dict:
    """
    Apply one "key.sub=value" override to a raw config mapping; the value is parsed as YAML.
    """
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not key=value")
    key, value = override.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: Union[str, Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    for o in overrides:
        apply_override(raw, o)
    return build_config(raw)


def config_to_dict(config) -> dict:
    def plain(v):
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(asdict(config))


def config_hash(config: ExperimentConfig) -> str:
    canonical = yaml.safe_dump(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run layout


@dataclass(frozen=True)
class RunPaths:
    root: Path
    seed: int

    @property
    def run_dir(self) -> Path:
        return self.root / str(self.seed)

    @property
    def checkpoints(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.run_dir / "metrics"

    @property
    def plots(self) -> Path:
        return self.run_dir / "plots"

    def create(self) -> "RunPaths":
        for d in (self.checkpoints, self.metrics, self.plots):
            ensure_dir(d)
        return self


def run_root(config: ExperimentConfig, out: Union[str, Path]) -> Path:
    root = ensure_dir(Path(out) / config_hash(config))
    record = root / "config.yaml"
    if not record.exists():
        with open(record, "w") as f:
            yaml.safe_dump({"config_hash": config_hash(config), "config": config_to_dict(config)}, f, sort_keys=True)
    return root


def run_paths(config: ExperimentConfig, out: Union[str, Path], seed: int) -> RunPaths:
    return RunPaths(run_root(config, out), int(seed)).create()


# ---------------------------------------------------------------------------
# stages


def _dataset_dir(config: ExperimentConfig, paths: RunPaths) -> Path:
    return Path(config.paths.dataset) if config.paths.dataset else paths.checkpoints / "dataset"


def _descriptor_dir(config: ExperimentConfig, paths: RunPaths) -> Path:
    return Path(config.paths.descriptor_checkpoint) if config.paths.descriptor_checkpoint else paths.checkpoints / "descriptor"


def _annotation_file(config: ExperimentConfig, paths: RunPaths) -> Path:
    return Path(config.paths.annotation) if config.paths.annotation else paths.checkpoints / "annotation" / "annotation.yaml"


def _policy_dir(config: ExperimentConfig, paths: RunPaths) -> Path:
    return Path(config.paths.policy_checkpoint) if config.paths.policy_checkpoint else paths.checkpoints / "policy"


def stage_gen_data(config: ExperimentConfig, paths: RunPaths) -> Path:
    root = _dataset_dir(config, paths)
    logger.info("rendering %d %s scenes to %s", config.render.scenes, config.family.value, root)
    return write_dataset(root, config.family, paths.seed, config.render)


def stage_train_descriptors(config: ExperimentConfig, paths: RunPaths):
    root = _dataset_dir(config, paths)
    if not (root / "manifest.yaml").exists():
        raise StageError("gen-data", f"no dataset at {root}")
    model = train_descriptors(load_dataset(root), config.descriptors, seed=paths.seed)
    model.save(_descriptor_dir(config, paths))
    write_csv(
        paths.metrics / "descriptor_loss.csv",
        ["step", "loss", "config_hash"],
        [{"step": i, "loss": v, "config_hash": config_hash(config)} for i, v in enumerate(model.loss_history)],
    )

    with open(root / "manifest.yaml") as f:
        manifest = yaml.safe_load(f)
    variation_seed = int(manifest["scenes"][0]["variation_seed"])
    scene = sample_variation(config.family, make_rng(variation_seed, "variation"))
    _, annotation = choose_reference_view(scene, make_rng(paths.seed, "reference_view"), config.render)
    save_annotation(annotation, _annotation_file(config, paths).parent)
    return model


def load_descriptor_stage(config: ExperimentConfig, paths: RunPaths):
    ckpt = _descriptor_dir(config, paths)
    if not (ckpt / "architecture.yaml").exists():
        raise StageError("train-descriptors", f"no descriptor checkpoint at {ckpt}")
    ann = _annotation_file(config, paths)
    if not ann.exists():
        raise StageError("train-descriptors", f"no reference annotation at {ann}")
    return DescriptorModel.load(ckpt), load_annotation(ann)


def _manual_file(config: ExperimentConfig) -> Path:
    if not config.ctrlgen.manual_file:
        raise StageError("train-policy", f"{config.approach.value} needs ctrlgen.manual_file")
    path = Path(config.ctrlgen.manual_file)
    if not path.is_absolute() and not path.exists():
        path = CONFIG_DIR.parent / path
    if not path.exists():
        raise StageError("train-policy", f"manual controller file {config.ctrlgen.manual_file} not found")
    return path


def make_controller_provider(config: ExperimentConfig, paths: Optional[RunPaths] = None, descriptor_stage=None) -> Callable[[TaskEnv], object]:
    """
    Controller-set builder for a TAC approach, called after every environment reset.
    """
    approach = config.approach
    if approach is Approach.EE_SPACE:
        raise ValueError("the EE-Space approach has no controller set")
    gains = config.controllers.gains()
    force = config.controllers.force_magnitude
    manual = load_manual_set(_manual_file(config)) if approach in (Approach.TAC_MANUAL, Approach.TAC_KEYPOINTS) else None
    indices = config.ctrlgen.keypoint_indices
    use_descriptors = approach.uses_descriptors and config.ctrlgen.keypoint_source == "descriptors"

    if use_descriptors:
        if descriptor_stage is None:
            if paths is None:
                raise StageError("train-descriptors", "no descriptor model available")
            descriptor_stage = load_descriptor_stage(config, paths)
        model, annotation = descriptor_stage

    def keypoints(env: TaskEnv) -> list:
        if not use_descriptors:
            kps = env.scene.semantic_keypoints()
        else:
            rng = make_rng(env.variation_seed, "keypoint_camera")
            cam = sample_cameras(scene_focus(env.scene), 1, rng, config.render)[0]
            located = locate_keypoints(model, annotation, render_view(env.scene, cam))
            try:
                kps = located.target_list()
            except KeypointError as e:
                raise ControllerGenerationError(str(e)) from e
        if indices is not None:
            kps = [kps[i] for i in indices]
        return kps

    def provider(env: TaskEnv):
        kps = keypoints(env)
        if manual is not None:
            return resolve_manual_controllers(manual, kps, env.scene.focus_rotation(), gains, force)
        axes = extract_candidate_axes(env.scene, config.ctrlgen.include_global_axes)
        return generate_controllers(config.family, kps, axes, keypoint_count=len(kps), gains=gains, force_magnitude=force)

    return provider


def make_actions(config: ExperimentConfig, paths: Optional[RunPaths] = None, descriptor_stage=None):
    if config.approach is Approach.EE_SPACE:
        return EESpaceActions()
    provider = make_controller_provider(config, paths, descriptor_stage)
    return ControllerActions(provider, use_pid=config.sim.use_pid, top_k=config.ppo.top_k)


def controller_count(config: ExperimentConfig, actions, seed: int) -> int:
    """
    Size of the action space; for TAC approaches this builds one controller set on a
    training variation.
    """
    if config.approach is Approach.EE_SPACE:
        return actions.size()
    probe = VectorEnv(config.family, 1, actions, seed, config.sim)
    probe.reset()
    return actions.size(0)


def make_policy(config: ExperimentConfig, n_actions: int, seed: int) -> ActorCritic:
    obs_size = OBSERVATION_SIZES[config.family]
    if config.approach is Approach.EE_SPACE:
        return GaussianPolicy.create(obs_size, n_actions, config.ppo.hidden, seed, config.ee_space.log_std_init)
    return TaskPolicy.create(obs_size, n_actions, config.ppo.hidden, seed)


def stage_train_policy(config: ExperimentConfig, paths: RunPaths, descriptor_stage=None) -> tuple[ActorCritic, list[dict]]:
    ppo = config.effective_ppo()
    actions = make_actions(config, paths, descriptor_stage)
    n_actions = controller_count(config, actions, paths.seed)
    if config.approach is not Approach.EE_SPACE:
        logger.info("%s on %s: controller set of size %d", config.approach.value, config.family.value, n_actions)
    policy = make_policy(config, n_actions, paths.seed)
    h = config_hash(config)
    csv_observer = MetricsCsvObserver(paths.metrics / "policy.csv", POLICY_COLUMNS)
    observer = ObserverGroup([csv_observer, LoggingTrainingObserver("update", ["steps", "mean_reward", "success_ratio", "kl", "clip_frac", "entropy"])])
    tagging = _TaggingObserver(observer, h)
    venv = VectorEnv(config.family, ppo.num_envs, actions, paths.seed, config.sim, observer=tagging)

    evaluate = None
    if config.eval.eval_every > 0:
        eval_actions = make_actions(config, paths, descriptor_stage)

        def evaluate(p):
            return eval_generalization(p, config, config.eval.training_variations, [paths.seed], actions=eval_actions).mean

    rows = train_policy(policy, venv, ppo, paths.seed, tagging, evaluate, config.eval.eval_every)
    policy.save(_policy_dir(config, paths))
    return policy, rows


class _TaggingObserver(ObserverGroup):
    def __init__(self, observer, config_hash_value: str):
        super().__init__([observer])
        self.config_hash_value = config_hash_value

    def on_update_finished(self, update: int, metrics: dict) -> None:
        super().on_update_finished(update, dict(metrics, config_hash=self.config_hash_value))


def load_policy_stage(config: ExperimentConfig, paths: RunPaths) -> ActorCritic:
    ckpt = _policy_dir(config, paths)
    if not (ckpt / "policy" / "architecture.yaml").exists():
        raise StageError("train-policy", f"no policy checkpoint at {ckpt}")
    return load_policy(ckpt)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    records: tuple
    per_seed: dict
    mean: float
    std: float
    wall_clock: float
    config_hash: str

    @staticmethod
    def from_records(records: Sequence[dict], wall_clock: float = 0.0, config_hash: str = "") -> "EvalReport":
        seeds = sorted({int(r["seed"]) for r in records})
        per_seed = {s: float(np.mean([r["success"] for r in records if r["seed"] == s])) for s in seeds}
        mean = float(np.mean([r["success"] for r in records])) if records else 0.0
        std = float(np.std(list(per_seed.values()), ddof=0)) if per_seed else 0.0
        return EvalReport(tuple(records), per_seed, mean, std, float(wall_clock), config_hash)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "mean": self.mean,
            "std": self.std,
            "wall_clock": self.wall_clock,
            "per_seed": {int(k): float(v) for k, v in self.per_seed.items()},
            "episodes": len(self.records),
        }


def eval_variation_seeds(n_variations: int, eval_seed: int = 2021) -> list[int]:
    rng = make_rng(eval_seed, "eval_variations")
    return [int(s) for s in rng.choice(np.arange(*EVAL_SEED_RANGE), size=n_variations, replace=False)]


def eval_generalization(
    policy,
    config: ExperimentConfig,
    n_variations: Optional[int] = None,
    seeds: Optional[Sequence[int]] = None,
    actions=None,
    paths: Optional[RunPaths] = None,
) -> EvalReport:
    """
    Deterministic-argmax episodes, one per held-out variation per seed. `policy` is one
    policy or a mapping seed -> policy.
    """
    n_variations = config.eval.n_variations if n_variations is None else n_variations
    seeds = list(config.seeds if seeds is None else seeds)
    variations = eval_variation_seeds(n_variations, config.eval.seed)
    actions = actions if actions is not None else make_actions(config, paths)
    h = config_hash(config)
    start = time.perf_counter()
    records = []
    for seed in seeds:
        p = policy[seed] if isinstance(policy, dict) else policy
        for v in variations:
            env = TaskEnv(config.family, config.sim)
            env.reset(v)
            try:
                actions.on_reset(0, env)
                result = run_episode(env, p, actions, deterministic=True)
                records.append(dict(seed=seed, variation_seed=v, success=bool(result.success), episode_return=result.episode_return, steps=result.steps, config_hash=h))
            except ENV_FAULTS as e:
                logger.warning("eval episode on variation %d failed: %s", v, e)
                records.append(dict(seed=seed, variation_seed=v, success=False, episode_return=0.0, steps=env.t, config_hash=h))
    report = EvalReport.from_records(records, time.perf_counter() - start, h)
    logger.info("eval %s/%s: success %.3f (std %.3f) over %d episodes", config.family.value, config.approach.value, report.mean, report.std, len(records))
    return report


def write_eval_report(report: EvalReport, directory: Union[str, Path]) -> Path:
    directory = ensure_dir(directory)
    write_csv(directory / "eval.csv", EVAL_COLUMNS, list(report.records))
    path = directory / "eval.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(report.to_dict(), f, sort_keys=False)
    return path


# ---------------------------------------------------------------------------
# keypoint learning


def stage_learn_keypoints(config: ExperimentConfig, paths: RunPaths) -> list[dict]:
    policy = load_policy_stage(config, paths)
    kcfg = config.keypointlearn
    n_actions = policy.action_size
    logger.info("learning %d keypoint(s) through a frozen %d-action policy", kcfg.keypoints, n_actions)
    net = KeypointNet.create(kcfg, paths.seed)
    render_config = replace(config.render, width=kcfg.image_size, height=kcfg.image_size)
    learner = KeypointLearner(net, policy, config.family, kcfg, paths.seed, config.sim, render_config, config.controllers.gains())
    h = config_hash(config)
    observer = _TaggingObserver(
        ObserverGroup([MetricsCsvObserver(paths.metrics / "keypoints.csv", KEYPOINT_COLUMNS), LoggingTrainingObserver("iteration", ["mean_return", "success_ratio", "entropy", "lr"])]),
        h,
    )
    rows = learner.train(observer)
    net.save(paths.checkpoints / "keypoint_net")
    return rows


# ---------------------------------------------------------------------------
# outputs


def emit_outputs(
    runs: dict,
    out_dir: Union[str, Path],
    name: str = "policy",
    columns: Sequence[str] = POLICY_COLUMNS,
    x: str = "steps",
    y: str = "success_ratio",
    label: str = "",
) -> list[Path]:
    """
    Write <out_dir>/<seed>/metrics/<name>.csv per seed and a seed-band plot at
    <out_dir>/plots/<name>_<y>.png.
    """
    out_dir = Path(out_dir)
    written = []
    curves = []
    for seed in sorted(runs):
        rows = runs[seed]
        written.append(write_csv(out_dir / str(seed) / "metrics" / f"{name}.csv", columns, rows))
        pts = [(float(r[x]), float(r[y])) for r in rows if r.get(x, "") != "" and r.get(y, "") != ""]
        if pts:
            curves.append((np.array([p[0] for p in pts]), np.array([p[1] for p in pts])))
    if curves:
        written.append(plot_learning_curves({label or name: curves}, out_dir / "plots" / f"{name}_{y}.png", xlabel=x, ylabel=y.replace("_", " ")))
    return written


def emit_plots(root: Union[str, Path], name: str = "policy", x: str = "steps", y: str = "success_ratio") -> Optional[Path]:
    """
    Rebuild the seed-band plot of a run directory from its per-seed metrics CSVs.
    """
    root = Path(root)
    curves = []
    for csv_path in sorted(root.glob(f"*/metrics/{name}.csv")):
        rows = [r for r in read_csv(csv_path) if r.get(y, "") != ""]
        if rows:
            curves.append((np.array([r[x] for r in rows], dtype=float), np.array([r[y] for r in rows], dtype=float)))
    if not curves:
        logger.warning("no %s metrics under %s", name, root)
        return None
    return plot_learning_curves({name: curves}, root / "plots" / f"{name}_{y}.png", xlabel=x, ylabel=y.replace("_", " "))


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class ExperimentArtifacts:
    root: Path
    policies: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    report: Optional[EvalReport] = None


def run_experiment(config: ExperimentConfig, out: Union[str, Path], seeds: Optional[Sequence[int]] = None, evaluate: bool = True) -> ExperimentArtifacts:
    """
    Full pipeline per seed: descriptors (when the approach needs them), controller
    provider, PPO training and held-out evaluation.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    artifacts = ExperimentArtifacts(run_root(config, out))
    for seed in seeds:
        paths = run_paths(config, out, seed)
        logger.info("run %s seed %d: %s on %s", artifacts.root.name, seed, config.approach.value, config.family.value)
        descriptor_stage = None
        if config.approach.uses_descriptors and config.ctrlgen.keypoint_source == "descriptors":
            have_model = (_descriptor_dir(config, paths) / "architecture.yaml").exists() and _annotation_file(config, paths).exists()
            if not have_model:
                if not (_dataset_dir(config, paths) / "manifest.yaml").exists():
                    stage_gen_data(config, paths)
                stage_train_descriptors(config, paths)
            descriptor_stage = load_descriptor_stage(config, paths)
        policy, rows = stage_train_policy(config, paths, descriptor_stage)
        artifacts.policies[seed] = policy
        artifacts.metrics[seed] = rows
    emit_plots(artifacts.root)
    if evaluate:
        records, wall_clock = [], 0.0
        for seed in seeds:
            paths = run_paths(config, out, seed)
            report = eval_generalization(artifacts.policies[seed], config, seeds=[seed], paths=paths)
            write_eval_report(report, paths.metrics)
            records.extend(report.records)
            wall_clock += report.wall_clock
        artifacts.report = EvalReport.from_records(records, wall_clock, config_hash(config))
        write_eval_report(artifacts.report, artifacts.root / "eval")
    return artifacts
