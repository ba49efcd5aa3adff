"""
PPO over parameterized controller actions.

The discrete task policy picks one controller index per decision; the EE-Space baseline
emits clamped end-effector deltas from a Gaussian head. Both share the rollout
collection, GAE and clipped-surrogate update in this module. Gradients of the PPO loss
are formed analytically at the network outputs and propagated with diffkernel.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from common import ctrl_c_handler, make_rng
from controllers import Command, ControllerRunner, ControllerSpecError, GripperAction, compose_commands
from ctrlgen import ControllerGenerationError, ControllerSet
from diffkernel import Adam, Graph, GraphError, Linear, Tanh, load_checkpoint, log_softmax, parameter_digest, save_checkpoint
from geom import AngleAxis, GeometryError
from sim import JointLimitError, SimConfig, SimulationError, TaskEnv, TaskFamily, UnreachableTargetError
from visualizer import BaseTrainingObserver, EpisodeWindow

logger = logging.getLogger(__name__)

TRAIN_SEED_RANGE = (0, 1_000_000)
EVAL_SEED_RANGE = (1_000_000, 2_000_000)
METRIC_COLUMNS = ["update", "steps", "mean_reward", "success_ratio", "kl", "clip_frac", "entropy"]
EE_ACTION_SIZE = 7
EE_MAX_TRANSLATION = 0.02
EE_MAX_ROTATION = 0.05
LOG_2PI = float(np.log(2.0 * np.pi))

ENV_FAULTS = (
    SimulationError,
    JointLimitError,
    UnreachableTargetError,
    GeometryError,
    ControllerSpecError,
    ControllerGenerationError,
    FloatingPointError,
)


class PpoError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.995
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 2.5e-4
    epochs: int = 4
    minibatches: int = 30
    entropy_coef: float = 0.01
    entropy_coef_final: Optional[float] = None
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    num_steps: int = 120
    num_envs: int = 20
    hidden: tuple = (64, 64)
    top_k: int = 1
    total_steps: int = 200_000

    def __post_init__(self):
        positive = dict(
            gamma=self.gamma, lam=self.lam, lr=self.lr, epochs=self.epochs, minibatches=self.minibatches,
            value_coef=self.value_coef, max_grad_norm=self.max_grad_norm, num_steps=self.num_steps,
            num_envs=self.num_envs, top_k=self.top_k, total_steps=self.total_steps,
        )
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must be in (0, 1), got {self.clip}")
        if self.entropy_coef < 0 or (self.entropy_coef_final is not None and self.entropy_coef_final < 0):
            raise ValueError("entropy coefficients must be non-negative")
        if self.gamma > 1.0 or self.lam > 1.0:
            raise ValueError("gamma and lam must be <= 1")

    @property
    def batch_size(self) -> int:
        return self.num_steps * self.num_envs

    def entropy_at(self, progress: float) -> float:
        """
        Entropy coefficient at training progress in [0, 1]; linear anneal when a final
        value is configured.
        """
        if self.entropy_coef_final is None:
            return self.entropy_coef
        progress = min(max(progress, 0.0), 1.0)
        return self.entropy_coef + (self.entropy_coef_final - self.entropy_coef) * progress


def build_mlp(in_size: int, hidden: Sequence[int], out_size: int, rng: Optional[np.random.Generator] = None, out_scale: float = 1.0) -> Graph:
    g = Graph()
    x = g.input("obs")
    width = in_size
    for i, h in enumerate(hidden):
        x = g.add(f"tanh{i}", Tanh(), g.add(f"fc{i}", Linear(width, h, rng=rng), x))
        width = h
    g.add("out", Linear(width, out_size, rng=rng, init_scale=out_scale), x)
    return g


# ---------------------------------------------------------------------------
# policies


class ActorCritic:
    """
    Policy/value pair. `evaluate` returns per-sample log-probs, entropies and values with
    a cache; `gradients` maps per-sample loss derivatives with respect to those three
    quantities to parameter gradients.
    """

    kind = ""

    def __init__(self, policy: Graph, value: Graph, obs_size: int, action_size: int, record: dict):
        self.policy = policy
        self.value = value
        self.obs_size = obs_size
        self.action_size = action_size
        self.record = record

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"policy/{k}": v for k, v in self.policy.parameters().items()}
        params.update({f"value/{k}": v for k, v in self.value.parameters().items()})
        return params

    def digest(self) -> str:
        return parameter_digest(self.parameters())

    def values(self, obs: np.ndarray) -> np.ndarray:
        return self.value.forward({"obs": obs}, ["out"])["out"][:, 0]

    def _value_gradients(self, d_values: np.ndarray) -> dict:
        grads = self.value.backward("out", d_values[:, None])
        return {f"value/{k}": v for k, v in grads.items() if k != "obs"}

    def _policy_gradients(self, d_out: np.ndarray) -> dict:
        grads = self.policy.backward("out", d_out)
        return {f"policy/{k}": v for k, v in grads.items() if k != "obs"}

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        save_checkpoint(self.policy, directory / "policy", dict(self.record, kind=self.kind, obs_size=self.obs_size, action_size=self.action_size))
        save_checkpoint(self.value, directory / "value", {"kind": "value"})
        return directory


class TaskPolicy(ActorCritic):
    """
    Categorical policy over controller indices.
    """

    kind = "categorical"

    @staticmethod
    def create(obs_size: int, n_actions: int, hidden: Sequence[int] = (64, 64), seed: int = 0) -> "TaskPolicy":
        rng = make_rng(seed, "policy_init")
        policy = build_mlp(obs_size, hidden, n_actions, rng, out_scale=0.01)
        value = build_mlp(obs_size, hidden, 1, rng)
        return TaskPolicy(policy, value, obs_size, n_actions, {"hidden": list(hidden), "seed": int(seed)})

    def logits(self, obs: np.ndarray) -> np.ndarray:
        return self.policy.forward({"obs": obs}, ["out"])["out"]

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        return log_softmax(self.logits(obs), axis=-1)

    def act(self, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
        logp_all = self.log_probs(obs)
        if deterministic:
            actions = np.argmax(logp_all, axis=-1)
        else:
            cdf = np.cumsum(np.exp(logp_all), axis=-1)
            draws = rng.random(len(obs)) * cdf[:, -1]
            actions = np.minimum((cdf < draws[:, None]).sum(axis=-1), self.action_size - 1)
        logp = logp_all[np.arange(len(obs)), actions]
        return actions, logp, self.values(obs), logp_all

    def evaluate(self, obs: np.ndarray, actions: np.ndarray):
        logp_all = self.log_probs(obs)
        p = np.exp(logp_all)
        entropy = -np.sum(p * logp_all, axis=-1)
        idx = np.asarray(actions, dtype=np.int64)
        logp = logp_all[np.arange(len(obs)), idx]
        values = self.values(obs)
        return logp, entropy, values, (logp_all, p, entropy, idx)

    def gradients(self, cache, d_logp: np.ndarray, d_entropy: np.ndarray, d_values: np.ndarray) -> dict:
        logp_all, p, entropy, idx = cache
        onehot = np.zeros_like(p)
        onehot[np.arange(len(idx)), idx] = 1.0
        d_logits = d_logp[:, None] * (onehot - p) - d_entropy[:, None] * p * (logp_all + entropy[:, None])
        grads = self._policy_gradients(d_logits)
        grads.update(self._value_gradients(d_values))
        return grads


class GaussianPolicy(ActorCritic):
    """
    Diagonal Gaussian head with a state-independent log standard deviation, used by the
    EE-Space baseline. Log-probs refer to unclamped samples.
    """

    kind = "gaussian"

    def __init__(self, policy: Graph, value: Graph, obs_size: int, action_size: int, record: dict, log_std: np.ndarray):
        super().__init__(policy, value, obs_size, action_size, record)
        self.log_std = log_std

    @staticmethod
    def create(obs_size: int, action_size: int = EE_ACTION_SIZE, hidden: Sequence[int] = (64, 64), seed: int = 0, log_std_init: float = -0.5) -> "GaussianPolicy":
        rng = make_rng(seed, "policy_init")
        policy = build_mlp(obs_size, hidden, action_size, rng, out_scale=0.01)
        value = build_mlp(obs_size, hidden, 1, rng)
        record = {"hidden": list(hidden), "seed": int(seed)}
        return GaussianPolicy(policy, value, obs_size, action_size, record, np.full(action_size, float(log_std_init)))

    def parameters(self) -> dict[str, np.ndarray]:
        params = super().parameters()
        params["log_std"] = self.log_std
        return params

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.policy.forward({"obs": obs}, ["out"])["out"]

    def log_prob(self, mean: np.ndarray, actions: np.ndarray) -> np.ndarray:
        z = (actions - mean) / np.exp(self.log_std)
        return np.sum(-0.5 * z * z - self.log_std - 0.5 * LOG_2PI, axis=-1)

    def entropy(self, n: int) -> np.ndarray:
        return np.full(n, float(np.sum(0.5 + 0.5 * LOG_2PI + self.log_std)))

    def act(self, obs: np.ndarray, rng: np.random.Generator, deterministic: bool = False):
        mean = self.mean(obs)
        if deterministic:
            actions = mean.copy()
        else:
            actions = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        return actions, self.log_prob(mean, actions), self.values(obs), mean

    def evaluate(self, obs: np.ndarray, actions: np.ndarray):
        mean = self.mean(obs)
        logp = self.log_prob(mean, actions)
        entropy = self.entropy(len(obs))
        return logp, entropy, self.values(obs), (mean, np.asarray(actions))

    def gradients(self, cache, d_logp: np.ndarray, d_entropy: np.ndarray, d_values: np.ndarray) -> dict:
        mean, actions = cache
        var = np.exp(2.0 * self.log_std)
        d_mean = d_logp[:, None] * (actions - mean) / var
        grads = self._policy_gradients(d_mean)
        z2 = (actions - mean) ** 2 / var
        grads["log_std"] = np.sum(d_logp[:, None] * (z2 - 1.0), axis=0) + np.sum(d_entropy) * np.ones_like(self.log_std)
        grads.update(self._value_gradients(d_values))
        return grads

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(super().save(directory))
        np.save(directory / "log_std.npy", self.log_std)
        return directory


def load_policy(directory: Union[str, Path]) -> ActorCritic:
    directory = Path(directory)
    policy, record = load_checkpoint(directory / "policy")
    value, _ = load_checkpoint(directory / "value")
    kind = record.get("kind")
    base = {k: v for k, v in record.items() if k not in ("kind", "obs_size", "action_size")}
    if kind == TaskPolicy.kind:
        return TaskPolicy(policy, value, int(record["obs_size"]), int(record["action_size"]), base)
    if kind == GaussianPolicy.kind:
        log_std = np.load(directory / "log_std.npy")
        return GaussianPolicy(policy, value, int(record["obs_size"]), int(record["action_size"]), base, log_std)
    raise GraphError(f"unknown policy kind {kind!r} in {directory}")


def ee_space_command(action: np.ndarray) -> Command:
    """
    Raw 7-d action -> Command: translation clamped to +/-0.02 m per axis, rotation vector
    clamped to +/-0.05 rad per axis, gripper closes when the last entry is positive.
    """
    action = np.asarray(action, dtype=np.float64)
    dx = np.clip(action[:3], -EE_MAX_TRANSLATION, EE_MAX_TRANSLATION)
    drot = np.clip(action[3:6], -EE_MAX_ROTATION, EE_MAX_ROTATION)
    gripper = GripperAction.CLOSE if action[6] > 0 else GripperAction.OPEN
    return Command(delta_translation=dx, delta_rotation=AngleAxis.from_rotvec(drot), gripper=gripper)


def ee_space_policy(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    """
    Deterministic clamped action (dx, drot, gripper in {0, 1}) for one observation.
    """
    mean = policy.mean(np.asarray(obs, dtype=np.float64)[None])[0]
    cmd = ee_space_command(mean)
    return np.concatenate([cmd.delta_translation, cmd.delta_rotation.rotvec, [float(cmd.gripper is GripperAction.CLOSE)]])


# ---------------------------------------------------------------------------
# environments


ControllerProvider = Callable[[TaskEnv], ControllerSet]


class ControllerActions:
    """
    Maps a controller index to a per-substep command source. The controller set is rebuilt
    by `provider` after every reset. With `top_k` > 1 the chosen controller is composed
    with the next most probable ones, in priority order.
    """

    continuous = False

    def __init__(self, provider: ControllerProvider, use_pid: bool = False, top_k: int = 1):
        self.provider = provider
        self.use_pid = use_pid
        self.top_k = top_k
        self.sets: dict[int, ControllerSet] = {}

    def on_reset(self, index: int, env: TaskEnv) -> None:
        self.sets[index] = self.provider(env)

    def size(self, index: int = 0) -> int:
        return len(self.sets[index])

    def command(self, index: int, action, extra=None):
        cset = self.sets[index]
        a = int(action)
        if not 0 <= a < len(cset):
            raise PpoError(f"action {a} outside controller set of size {len(cset)}")
        if self.top_k <= 1 or extra is None:
            return ControllerRunner([cset[a]], use_pid=self.use_pid)
        order = [a] + [int(i) for i in np.argsort(-extra, kind="stable") if int(i) != a][: self.top_k - 1]
        runners = [ControllerRunner([cset[i]], use_pid=self.use_pid) for i in order]
        limit = max(r.max_translation for r in runners)
        return lambda ee: compose_commands([r(ee) for r in runners], max_translation=limit)


class EESpaceActions:
    continuous = True

    def on_reset(self, index: int, env: TaskEnv) -> None:
        pass

    def size(self, index: int = 0) -> int:
        return EE_ACTION_SIZE

    def command(self, index: int, action, extra=None):
        return ee_space_command(action)


@dataclass
class StepOutcome:
    observations: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    successes: np.ndarray
    dropped: np.ndarray


class VectorEnv:
    """
    A fixed number of TaskEnv workers stepped in lockstep with automatic reset. Variation
    seeds are drawn from `seed_range` by a generator owned by this object.
    """

    def __init__(
        self,
        family: Union[TaskFamily, str],
        num_envs: int,
        actions,
        seed: int,
        sim_config: Optional[SimConfig] = None,
        seed_range: tuple = TRAIN_SEED_RANGE,
        observer: Optional[BaseTrainingObserver] = None,
        max_reset_attempts: int = 10,
    ):
        self.family = TaskFamily(family)
        self.envs = [TaskEnv(self.family, sim_config) for _ in range(num_envs)]
        self.actions = actions
        self.seed_range = seed_range
        self.rng = make_rng(seed, "variations", self.family.value)
        self.observer = observer or BaseTrainingObserver()
        self.max_reset_attempts = max_reset_attempts
        self.episode_returns = np.zeros(num_envs)
        self.used_seeds: list[int] = []
        self._obs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.envs)

    @property
    def observation_size(self) -> int:
        return self.envs[0].observation_size

    def _reset_one(self, i: int) -> np.ndarray:
        for _ in range(self.max_reset_attempts):
            seed = int(self.rng.integers(*self.seed_range))
            self.used_seeds.append(seed)
            obs = self.envs[i].reset(seed)
            try:
                self.actions.on_reset(i, self.envs[i])
            except ENV_FAULTS as e:
                self.observer.on_worker_failure(i, f"variation {seed}: {e}")
                continue
            self.episode_returns[i] = 0.0
            return obs
        raise PpoError(f"worker {i}: no usable variation after {self.max_reset_attempts} attempts")

    def reset(self) -> np.ndarray:
        self._obs = np.stack([self._reset_one(i) for i in range(len(self.envs))])
        return self._obs

    def step(self, actions, extras=None) -> StepOutcome:
        if self._obs is None:
            self.reset()
        n = len(self.envs)
        obs = np.zeros_like(self._obs)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        successes = np.zeros(n, dtype=bool)
        dropped = np.zeros(n, dtype=bool)
        for i, env in enumerate(self.envs):
            try:
                source = self.actions.command(i, actions[i], None if extras is None else extras[i])
                result = env.step(source, action=-1 if self.actions.continuous else int(actions[i]))
            except ENV_FAULTS as e:
                logger.warning("dropping episode of worker %d (variation %s): %s", i, env.variation_seed, e)
                self.observer.on_worker_failure(i, str(e))
                dones[i] = dropped[i] = True
                obs[i] = self._reset_one(i)
                continue
            rewards[i] = result.reward
            self.episode_returns[i] += result.reward
            if result.done:
                dones[i] = True
                successes[i] = result.success
                self.observer.on_episode_finished(i, float(self.episode_returns[i]), bool(result.success))
                obs[i] = self._reset_one(i)
            else:
                obs[i] = result.observation
        self._obs = obs
        return StepOutcome(obs, rewards, dones, successes, dropped)


@dataclass(frozen=True)
class EpisodeResult:
    episode_return: float
    success: bool
    steps: int


def run_episode(
    env: TaskEnv,
    policy: ActorCritic,
    actions,
    index: int = 0,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = True,
) -> EpisodeResult:
    """
    Roll out one episode from the env's current (freshly reset) state. `actions` must
    already hold the controller set for `index` when it is a ControllerActions.
    """
    if not actions.continuous and actions.size(index) != policy.action_size:
        raise PpoError(f"policy has {policy.action_size} actions, controller set has {actions.size(index)}")
    obs = env.observation()
    total = 0.0
    while True:
        a, _, _, extra = policy.act(obs[None], rng, deterministic)
        source = actions.command(index, a[0], None if actions.continuous else extra[0])
        result = env.step(source, action=-1 if actions.continuous else int(a[0]))
        total += result.reward
        if result.done:
            return EpisodeResult(total, bool(result.success), env.t)
        obs = result.observation


# ---------------------------------------------------------------------------
# rollouts and advantages


@dataclass
class RolloutBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_returns: list = field(default_factory=list)
    episode_successes: list = field(default_factory=list)
    dropped: int = 0

    def __len__(self) -> int:
        return int(np.prod(self.rewards.shape))

    def flat(self) -> dict:
        if self.advantages is None:
            raise PpoError("advantages have not been computed")
        n = len(self)
        return {
            "observations": self.observations.reshape(n, -1),
            "actions": self.actions.reshape((n,) + self.actions.shape[2:]),
            "log_probs": self.log_probs.reshape(n),
            "values": self.values.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


def collect_rollouts(policy: ActorCritic, venv: VectorEnv, steps: int, rng: np.random.Generator) -> RolloutBatch:
    """
    Run the sampling policy for `steps` decisions in every worker. Episodes that end in
    an env fault are dropped from the episode statistics.
    """
    obs = venv._obs if venv._obs is not None else venv.reset()
    n = len(venv)
    cont = venv.actions.continuous
    act_shape = (steps, n, policy.action_size) if cont else (steps, n)
    batch = RolloutBatch(
        observations=np.zeros((steps, n, obs.shape[1])),
        actions=np.zeros(act_shape) if cont else np.zeros(act_shape, dtype=np.int64),
        log_probs=np.zeros((steps, n)),
        rewards=np.zeros((steps, n)),
        values=np.zeros((steps, n)),
        dones=np.zeros((steps, n), dtype=bool),
        last_values=np.zeros(n),
    )
    running = venv.episode_returns.copy()
    for t in range(steps):
        actions, logp, values, extra = policy.act(obs, rng)
        batch.observations[t] = obs
        batch.actions[t] = actions
        batch.log_probs[t] = logp
        batch.values[t] = values
        out = venv.step(actions, None if cont else extra)
        batch.rewards[t] = out.rewards
        batch.dones[t] = out.dones
        running += out.rewards
        for i in np.nonzero(out.dones)[0]:
            if out.dropped[i]:
                batch.dropped += 1
            else:
                batch.episode_returns.append(float(running[i]))
                batch.episode_successes.append(bool(out.successes[i]))
            running[i] = 0.0
        obs = out.observations
    batch.last_values = policy.values(obs)
    return batch


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    last_value=0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation along axis 0. `dones[t]` marks step t as the last of
    its episode (bootstrap value 0); `last_value` bootstraps the step after the final one.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    not_done = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    running = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / max(float(advantages.std()), 1e-8)


def finish_batch(batch: RolloutBatch, config: PpoConfig) -> RolloutBatch:
    batch.advantages, batch.returns = gae(batch.rewards, batch.values, batch.dones, config.gamma, config.lam, batch.last_values)
    return batch


# ---------------------------------------------------------------------------
# update


def ppo_loss_gradients(
    logp: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    values: np.ndarray,
    returns: np.ndarray,
    clip: float,
    value_coef: float,
    entropy_coef: float,
    entropy: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, dict]:
    """
    Clipped-surrogate loss (to minimize) and its derivatives with respect to the per-sample
    log-prob, entropy and value.
    """
    n = len(logp)
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr2 = clipped * advantages
    inside = (ratio > 1.0 - clip) & (ratio < 1.0 + clip)
    unclipped = (surr1 < surr2) | ((surr1 == surr2) & inside)
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    value_loss = float(np.mean((values - returns) ** 2))
    mean_entropy = float(np.mean(entropy))
    loss = policy_loss + value_coef * value_loss - entropy_coef * mean_entropy

    d_logp = np.where(unclipped, -advantages * ratio / n, 0.0)
    d_values = 2.0 * value_coef * (values - returns) / n
    d_entropy = np.full(n, -entropy_coef / n)
    log_ratio = logp - old_logp
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": mean_entropy,
        "kl": float(np.mean(ratio - 1.0 - log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "max_ratio_error": float(np.max(np.abs(ratio - 1.0))) if n else 0.0,
    }
    return loss, d_logp, d_entropy, d_values, stats


def ppo_update(
    policy: ActorCritic,
    optimizer: Adam,
    batch: RolloutBatch,
    config: PpoConfig,
    rng: np.random.Generator,
    entropy_coef: Optional[float] = None,
) -> dict:
    """
    Epochs of minibatch clipped-surrogate updates on a batch with computed advantages.
    Advantages are normalized over the whole batch first.
    """
    data = batch.flat()
    n = len(batch)
    advantages = normalize_advantages(data["advantages"])
    entropy_coef = config.entropy_coef if entropy_coef is None else entropy_coef
    n_mb = min(config.minibatches, n)
    history = []
    initial_ratio_error = None
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, n_mb):
            obs = data["observations"][idx]
            logp, entropy, values, cache = policy.evaluate(obs, data["actions"][idx])
            loss, d_logp, d_ent, d_val, stats = ppo_loss_gradients(
                logp, data["log_probs"][idx], advantages[idx], values, data["returns"][idx],
                config.clip, config.value_coef, entropy_coef, entropy,
            )
            if not np.isfinite(loss):
                raise PpoError(
                    f"non-finite PPO loss: policy {stats['policy_loss']}, value {stats['value_loss']}, "
                    f"entropy {stats['entropy']}, max |ratio-1| {stats['max_ratio_error']}"
                )
            if initial_ratio_error is None:
                initial_ratio_error = stats["max_ratio_error"]
            grads = policy.gradients(cache, d_logp, d_ent, d_val)
            optimizer.step(grads)
            history.append(dict(stats, loss=loss))
    metrics = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    metrics["initial_ratio_error"] = float(initial_ratio_error)
    metrics["entropy_coef"] = float(entropy_coef)
    return metrics


def make_optimizer(policy: ActorCritic, config: PpoConfig) -> Adam:
    return Adam(policy.parameters(), lr=config.lr, max_grad_norm=config.max_grad_norm)


def train_policy(
    policy: ActorCritic,
    venv: VectorEnv,
    config: PpoConfig,
    seed: int,
    observer: Optional[BaseTrainingObserver] = None,
    evaluate: Optional[Callable[[ActorCritic], float]] = None,
    eval_every: int = 0,
) -> list[dict]:
    """
    PPO training loop. One metrics row per update; `evaluate`, when given, is called every
    `eval_every` updates and its success ratio is added as `eval_success`.
    """
    observer = observer or BaseTrainingObserver()
    rng = make_rng(seed, "ppo")
    optimizer = make_optimizer(policy, config)
    window = EpisodeWindow(20)
    n_updates = max(1, config.total_steps // config.batch_size)
    rows = []
    steps = 0
    with ctrl_c_handler() as interrupted:
        for update in range(n_updates):
            if interrupted:
                logger.warning("policy training interrupted after %d updates", update)
                break
            batch = finish_batch(collect_rollouts(policy, venv, config.num_steps, rng), config)
            steps += len(batch)
            for r, s in zip(batch.episode_returns, batch.episode_successes):
                window.add(r, s)
            coef = config.entropy_at(update / max(n_updates - 1, 1))
            metrics = ppo_update(policy, optimizer, batch, config, rng, coef)
            row = dict(
                update=update,
                steps=steps,
                mean_reward=float(np.mean(batch.episode_returns)) if batch.episode_returns else window.mean_return,
                success_ratio=window.success_ratio,
                kl=metrics["kl"],
                clip_frac=metrics["clip_frac"],
                entropy=metrics["entropy"],
                episodes=len(batch.episode_returns),
                dropped=batch.dropped,
            )
            if evaluate is not None and eval_every > 0 and (update + 1) % eval_every == 0:
                row["eval_success"] = float(evaluate(policy))
            rows.append(row)
            observer.on_update_finished(update, row)
    return rows
