import numpy as np
import pytest
from numpy.testing import assert_allclose

from diffkernel import Adam, log_softmax, parameter_digest
from geom import CameraModel, backproject_pixel
from keypointlearn import (
    FrozenPolicyError,
    KeypointEpisode,
    KeypointLearnError,
    KeypointLearnConfig,
    KeypointLearner,
    KeypointNet,
    reinforce_update,
    sample_cells,
    sample_keypoints,
    sample_targets,
    superpixel_to_target,
)
from rl import TaskPolicy
from sim import OBSERVATION_SIZES, SimConfig, TaskFamily

TINY = KeypointLearnConfig(
    encoder_channels=(4, 4, 4, 4),
    bridge_channels=4,
    decoder_channels=(4, 4),
    image_size=16,
    episodes_per_iteration=2,
    iterations=2,
)


def camera(size=16):
    return CameraModel(20.0, 20.0, (size - 1) / 2, (size - 1) / 2, np.eye(3), np.zeros(3), size, size)


def test_uniform_log_prob():
    sample = sample_cells(np.full((1, 1024), -np.log(1024.0)), 32, np.random.default_rng(0))
    assert sample.log_prob == pytest.approx(-np.log(1024.0))
    assert sample.entropy() == pytest.approx(np.log(1024.0))
    r, c = sample.rows_cols[0]
    assert r * 32 + c == sample.cells[0]


def test_dominant_logit_is_sampled():
    logits = np.zeros((1, 1024))
    logits[0, 77] = 20.0
    log_probs = log_softmax(logits, axis=-1)
    rng = np.random.default_rng(1)
    hits = sum(sample_cells(log_probs, 32, rng).cells[0] == 77 for _ in range(1000))
    assert hits >= 998


def test_one_cell_per_keypoint_channel():
    log_probs = log_softmax(np.random.default_rng(2).normal(size=(3, 16)), axis=-1)
    sample = sample_cells(log_probs, 4, np.random.default_rng(3))
    assert sample.cells.shape == (3,)
    assert sample.log_prob == pytest.approx(sample.channel_log_probs.sum())


def test_superpixel_uniform_depth():
    depth = np.full((16, 16), 1.0)
    target = superpixel_to_target((1, 2), depth, camera())
    assert_allclose(target, backproject_pixel((9.5, 5.5), 1.0, camera()))


def test_superpixel_ignores_background_pixels():
    depth = np.zeros((16, 16))
    depth[4:8, 8:10] = 2.0
    target = superpixel_to_target((1, 2), depth, camera())
    assert_allclose(target, backproject_pixel((8.5, 5.5), 2.0, camera()))


def test_background_superpixel_is_invalid():
    depth = np.zeros((16, 16))
    assert superpixel_to_target((0, 0), depth, camera()) is None
    depth[0, 0] = 1.0
    log_probs = np.log(np.full((2, 16), 1 / 16))
    sample = sample_cells(log_probs, 4, np.random.default_rng(0))
    object.__setattr__(sample, "rows_cols", np.array([[0, 0], [3, 3]]))
    assert sample_targets(sample, depth, camera()) is None


def test_net_output_is_grid_distribution():
    net = KeypointNet.create(TINY, 0)
    log_probs = net.log_probs(np.random.default_rng(0).uniform(size=(16, 16, 3)))
    assert log_probs.shape == (1, 16)
    assert_allclose(np.exp(log_probs).sum(axis=-1), 1.0)
    with pytest.raises(ValueError):
        sample_keypoints(net, np.zeros((8, 8, 3)), np.random.default_rng(0))


def episode(net, image, rng, episode_return):
    sample = sample_keypoints(net, image, rng)
    return KeypointEpisode(image, sample, episode_return, False, True)


def test_zero_returns_leave_parameters_unchanged():
    net = KeypointNet.create(TINY, 1)
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(16, 16, 3))
    before = parameter_digest(net.graph.parameters())
    reinforce_update(net, [episode(net, image, rng, 0.0)], Adam(net.graph.parameters(), lr=1e-3))
    assert parameter_digest(net.graph.parameters()) == before


def test_positive_return_reinforces_sampled_cell():
    net = KeypointNet.create(TINY, 2)
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(16, 16, 3))
    ep = episode(net, image, rng, 1.0)
    cell = ep.sample.cells[0]
    before = net.log_probs(image)[0, cell]
    metrics = reinforce_update(net, [ep], Adam(net.graph.parameters(), lr=1e-3))
    assert net.log_probs(image)[0, cell] > before
    assert metrics["mean_return"] == 1.0


def test_update_needs_episodes():
    net = KeypointNet.create(TINY, 0)
    with pytest.raises(ValueError):
        reinforce_update(net, [], Adam(net.graph.parameters(), lr=1e-3))


def test_lr_schedule():
    schedule = KeypointLearnConfig().schedule()
    assert schedule(0) == pytest.approx(1e-3)
    assert schedule(200) == pytest.approx(3e-4)
    assert schedule(1000) == pytest.approx(9e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        KeypointLearnConfig(image_size=20)
    with pytest.raises(ValueError):
        KeypointLearnConfig(keypoints=0)
    assert KeypointLearnConfig().grid == 32
    assert KeypointLearnConfig().cell_size == 4


def test_net_save_load(tmp_path):
    net = KeypointNet.create(TINY, 3)
    net.save(tmp_path / "kp")
    loaded = KeypointNet.load(tmp_path / "kp")
    assert loaded.config == TINY
    image = np.random.default_rng(3).uniform(size=(16, 16, 3))
    assert_allclose(loaded.log_probs(image), net.log_probs(image))


def block_learner(seed=0):
    policy = TaskPolicy.create(OBSERVATION_SIZES[TaskFamily.BLOCK], 4, hidden=(8,), seed=seed)
    net = KeypointNet.create(TINY, seed)
    return KeypointLearner(net, policy, "block", TINY, seed, sim_config=SimConfig(horizon=3)), policy


def test_frozen_policy_change_is_detected():
    learner, policy = block_learner()
    learner.check_policy()
    policy.parameters()["policy/out.bias"][0] += 1.0
    with pytest.raises(FrozenPolicyError):
        learner.check_policy()


def test_iteration_leaves_policy_untouched():
    learner, policy = block_learner(4)
    digest = policy.digest()
    rows = learner.train()
    assert [r["iteration"] for r in rows] == [0, 1]
    assert policy.digest() == digest
    for row in rows:
        assert 0 <= row["invalid"] <= TINY.episodes_per_iteration
        assert np.isfinite(row["mean_return"])


def test_learning_is_deterministic():
    a, _ = block_learner(5)
    b, _ = block_learner(5)
    assert a.train() == b.train()
    assert parameter_digest(a.net.graph.parameters()) == parameter_digest(b.net.graph.parameters())


def test_iteration_with_every_episode_dropped(monkeypatch):
    learner, _ = block_learner()
    monkeypatch.setattr(learner, "run_episode", lambda variation_seed: None)
    with pytest.raises(KeypointLearnError, match="dropped"):
        learner.iteration()
