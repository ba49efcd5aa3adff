"""
Keypoint learning by Reinforce through a frozen task policy.

A convolutional keypoint network maps an RGB view to one spatial softmax per keypoint over
a 32 x 32 grid of superpixels. Each episode samples one cell per keypoint, lifts it to a
3D controller target, and lets the frozen task policy act with the resulting controller
set; the episode return weights the score-function gradient.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from common import ctrl_c_handler, make_rng
from ctrlgen import extract_candidate_axes, generate_controllers
from diffkernel import (
    Adam,
    Conv2d,
    Graph,
    LogSoftmax,
    MaxPool2d,
    ReLU,
    Reshape,
    StepLr,
    Upsample2x,
    add_gradients,
    load_checkpoint,
    save_checkpoint,
)
from geom import CameraModel, GeometryError, backproject_pixel
from render import RenderConfig, render_view, sample_cameras, scene_focus
from rl import ENV_FAULTS, TRAIN_SEED_RANGE, ActorCritic, ControllerActions, run_episode
from sim import SimConfig, TaskEnv, TaskFamily
from visualizer import BaseTrainingObserver

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["iteration", "mean_return", "success_ratio", "entropy"]
CAMERA_TARGET_JITTER = 0.05


class KeypointLearnError(RuntimeError):
    pass


class FrozenPolicyError(KeypointLearnError):
    pass


@dataclass(frozen=True)
class KeypointLearnConfig:
    keypoints: int = 1
    encoder_channels: tuple = (64, 128, 256, 512)
    bridge_channels: int = 32
    decoder_channels: tuple = (16, 4)
    image_size: int = 128
    episodes_per_iteration: int = 24
    iterations: int = 1500
    lr: float = 1e-3
    lr_milestones: tuple = (200, 1000)
    lr_gamma: float = 0.3
    invalid_return: float = -12.0
    baseline: bool = False
    baseline_decay: float = 0.9
    deterministic_policy: bool = True

    def __post_init__(self):
        if self.keypoints < 1:
            raise ValueError("keypoints must be >= 1")
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 2:
            raise ValueError("expected four encoder and two decoder widths")
        if self.image_size % 16:
            raise ValueError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.episodes_per_iteration < 1 or self.iterations < 1 or self.lr <= 0:
            raise ValueError("episodes_per_iteration, iterations and lr must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // 4

    @property
    def cell_size(self) -> int:
        return self.image_size // self.grid

    def schedule(self) -> StepLr:
        return StepLr(self.lr, tuple(self.lr_milestones), self.lr_gamma)


def build_keypoint_graph(config: KeypointLearnConfig, rng: Optional[np.random.Generator] = None) -> Graph:
    """
    Encoder of four conv/relu/pool blocks, a bridge conv, two upsampling decoder blocks and
    a 1x1 conv to one channel per keypoint; "log_probs" is the per-channel log-softmax over
    the flattened grid.
    """
    g = Graph()
    x = g.input("image")
    width = 3
    for i, c in enumerate(config.encoder_channels):
        x = g.add(f"enc{i}_pool", MaxPool2d(), g.add(f"enc{i}_relu", ReLU(), g.add(f"enc{i}", Conv2d(width, c, rng=rng), x)))
        width = c
    x = g.add("bridge_relu", ReLU(), g.add("bridge", Conv2d(width, config.bridge_channels, rng=rng), x))
    width = config.bridge_channels
    for i, c in enumerate(config.decoder_channels):
        x = g.add(f"dec{i}_relu", ReLU(), g.add(f"dec{i}", Conv2d(width, c, rng=rng), g.add(f"up{i}", Upsample2x(), x)))
        width = c
    g.add("logits", Conv2d(width, config.keypoints, kernel_size=1, padding=0, rng=rng), x)
    g.add("flat", Reshape((config.keypoints, config.grid * config.grid)), "logits")
    g.add("log_probs", LogSoftmax(axis=-1), "flat")
    return g


class KeypointNet:
    def __init__(self, graph: Graph, config: KeypointLearnConfig):
        self.graph = graph
        self.config = config

    @staticmethod
    def create(config: KeypointLearnConfig, seed: int) -> "KeypointNet":
        return KeypointNet(build_keypoint_graph(config, make_rng(seed, "keypoint_init")), config)

    def log_probs(self, image: np.ndarray) -> np.ndarray:
        """
        (H, W, 3) image -> (C, grid * grid) log-probabilities.
        """
        x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
        return self.graph.forward({"image": x}, ["log_probs"])["log_probs"][0]

    def save(self, directory: Union[str, Path]) -> Path:
        cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.config).items()}
        return save_checkpoint(self.graph, directory, {"kind": "keypoint", "config": cfg})

    @staticmethod
    def load(directory: Union[str, Path]) -> "KeypointNet":
        graph, metadata = load_checkpoint(directory)
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in metadata["config"].items()}
        return KeypointNet(graph, KeypointLearnConfig(**cfg))


@dataclass(frozen=True, eq=False)
class SuperpixelSample:
    cells: np.ndarray
    rows_cols: np.ndarray
    log_prob: float
    channel_log_probs: np.ndarray
    probs: np.ndarray

    def entropy(self) -> float:
        """
        Mean per-channel entropy of the spatial distributions.
        """
        p = self.probs
        return float(np.mean(-np.sum(p * np.log(np.where(p > 0, p, 1.0)), axis=-1)))


def sample_cells(log_probs: np.ndarray, grid: int, rng: np.random.Generator) -> SuperpixelSample:
    probs = np.exp(log_probs)
    cdf = np.cumsum(probs, axis=-1)
    draws = rng.random(len(probs)) * cdf[:, -1]
    cells = np.minimum((cdf < draws[:, None]).sum(axis=-1), probs.shape[1] - 1)
    chosen = log_probs[np.arange(len(cells)), cells]
    return SuperpixelSample(cells, np.stack([cells // grid, cells % grid], axis=1), float(chosen.sum()), chosen, probs)


def sample_keypoints(net: KeypointNet, image: np.ndarray, rng: np.random.Generator) -> SuperpixelSample:
    image = np.asarray(image)
    if image.shape[:2] != (net.config.image_size, net.config.image_size):
        raise ValueError(f"keypoint net expects {net.config.image_size}x{net.config.image_size} images, got {image.shape[:2]}")
    return sample_cells(net.log_probs(image), net.config.grid, rng)


def superpixel_to_target(cell, depth: np.ndarray, cam: CameraModel, cell_size: int = 4) -> Optional[np.ndarray]:
    """
    Average world position of the on-object pixels of a (row, col) superpixel; None when
    all of its pixels are background.
    """
    row, col = int(cell[0]), int(cell[1])
    points = []
    for v in range(row * cell_size, (row + 1) * cell_size):
        for u in range(col * cell_size, (col + 1) * cell_size):
            d = float(depth[v, u])
            if d <= 0:
                continue
            try:
                points.append(backproject_pixel((u, v), d, cam))
            except GeometryError:
                continue
    if not points:
        return None
    return np.mean(points, axis=0)


def sample_targets(sample: SuperpixelSample, depth: np.ndarray, cam: CameraModel, cell_size: int = 4) -> Optional[list[np.ndarray]]:
    targets = []
    for rc in sample.rows_cols:
        t = superpixel_to_target(rc, depth, cam, cell_size)
        if t is None:
            return None
        targets.append(t)
    return targets


@dataclass(frozen=True, eq=False)
class KeypointEpisode:
    image: np.ndarray
    sample: SuperpixelSample
    episode_return: float
    success: bool
    valid: bool


def reinforce_gradients(net: KeypointNet, episodes: list[KeypointEpisode], baseline: float = 0.0) -> dict:
    """
    Gradient of -mean((R - b) * sum_c log psi(cell_c)) over the episodes.
    """
    n = len(episodes)
    total = None
    for ep in episodes:
        net.log_probs(ep.image)
        grad = np.zeros((1,) + ep.sample.probs.shape)
        weight = -(ep.episode_return - baseline) / n
        grad[0, np.arange(len(ep.sample.cells)), ep.sample.cells] = weight
        grads = net.graph.backward("log_probs", grad)
        grads.pop("image", None)
        total = add_gradients(total, grads)
    return total


def reinforce_update(net: KeypointNet, episodes: list[KeypointEpisode], optimizer: Adam, baseline: float = 0.0) -> dict:
    if not episodes:
        raise ValueError("reinforce_update needs at least one episode")
    lr = optimizer.lr
    optimizer.step(reinforce_gradients(net, episodes, baseline))
    return {
        "mean_return": float(np.mean([e.episode_return for e in episodes])),
        "success_ratio": float(np.mean([e.success for e in episodes])),
        "entropy": float(np.mean([e.sample.entropy() for e in episodes])),
        "lr": lr,
    }


class KeypointLearner:
    """
    Runs episodes of a frozen task policy with sampled keypoints and updates the keypoint
    net. The policy's parameter digest is checked around every iteration.
    """

    def __init__(
        self,
        net: KeypointNet,
        policy: ActorCritic,
        family: Union[TaskFamily, str],
        config: KeypointLearnConfig,
        seed: int,
        sim_config: Optional[SimConfig] = None,
        render_config: Optional[RenderConfig] = None,
        gains=None,
    ):
        self.net = net
        self.policy = policy
        self.family = TaskFamily(family)
        self.config = config
        self.sim_config = sim_config
        self.render_config = render_config or RenderConfig(width=config.image_size, height=config.image_size)
        self.gains = gains
        self.rng = make_rng(seed, "keypoint_learning")
        self.optimizer = Adam(net.graph.parameters(), lr=config.schedule())
        self.baseline = 0.0
        self.policy_digest = policy.digest()

    def check_policy(self) -> None:
        digest = self.policy.digest()
        if digest != self.policy_digest:
            raise FrozenPolicyError(f"task policy parameters changed during keypoint learning ({self.policy_digest[:12]} -> {digest[:12]})")

    def run_episode(self, variation_seed: int) -> Optional[KeypointEpisode]:
        env = TaskEnv(self.family, self.sim_config)
        env.reset(variation_seed)
        target = scene_focus(env.scene) + self.rng.uniform(-CAMERA_TARGET_JITTER, CAMERA_TARGET_JITTER, size=3)
        view = render_view(env.scene, sample_cameras(target, 1, self.rng, self.render_config)[0])
        sample = sample_keypoints(self.net, view.features, self.rng)
        targets = sample_targets(sample, view.depth, view.camera, self.config.cell_size)
        if targets is None:
            return KeypointEpisode(view.features, sample, self.config.invalid_return, False, False)
        try:
            cset = generate_controllers(
                self.family, targets, extract_candidate_axes(env.scene), keypoint_count=self.config.keypoints, gains=self.gains
            )
            actions = ControllerActions(lambda _env: cset, use_pid=env.config.use_pid)
            actions.on_reset(0, env)
            result = run_episode(env, self.policy, actions, rng=self.rng, deterministic=self.config.deterministic_policy)
        except ENV_FAULTS as e:
            logger.warning("dropping keypoint episode on variation %d: %s", variation_seed, e)
            return None
        return KeypointEpisode(view.features, sample, result.episode_return, result.success, True)

    def iteration(self) -> dict:
        self.check_policy()
        episodes = []
        for _ in range(self.config.episodes_per_iteration):
            ep = self.run_episode(int(self.rng.integers(*TRAIN_SEED_RANGE)))
            if ep is not None:
                episodes.append(ep)
        if not episodes:
            raise KeypointLearnError("every episode of the iteration was dropped")
        baseline = self.baseline if self.config.baseline else 0.0
        metrics = reinforce_update(self.net, episodes, self.optimizer, baseline)
        if self.config.baseline:
            d = self.config.baseline_decay
            self.baseline = d * self.baseline + (1.0 - d) * metrics["mean_return"]
        metrics["invalid"] = sum(not e.valid for e in episodes)
        self.check_policy()
        return metrics

    def train(self, observer: Optional[BaseTrainingObserver] = None) -> list[dict]:
        observer = observer or BaseTrainingObserver()
        rows = []
        with ctrl_c_handler() as interrupted:
            for it in range(self.config.iterations):
                if interrupted:
                    logger.warning("keypoint learning interrupted at iteration %d", it)
                    break
                row = dict(iteration=it, **self.iteration())
                rows.append(row)
                observer.on_update_finished(it, row)
        return rows
