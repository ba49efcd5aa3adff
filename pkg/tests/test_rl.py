import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from controllers import ControllerKind, ControllerSpec, GripperAction
from ctrlgen import ControllerSet, extract_candidate_axes, generate_controllers
from diffkernel import Adam
from rl import (
    EE_MAX_ROTATION,
    ControllerActions,
    EESpaceActions,
    GaussianPolicy,
    PpoConfig,
    PpoError,
    TaskPolicy,
    VectorEnv,
    collect_rollouts,
    ee_space_command,
    ee_space_policy,
    finish_batch,
    gae,
    load_policy,
    normalize_advantages,
    ppo_loss_gradients,
    ppo_update,
    run_episode,
)
from sim import HOME_Q, SimConfig, SimulationError, TaskEnv, TaskFamily, ee_from_joints
from visualizer import BaseTrainingObserver


def semantic_provider(env):
    return generate_controllers(env.family, env.scene.semantic_keypoints(), extract_candidate_axes(env.scene))


def numeric_gradient(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        plus = f()
        x[idx] = old - eps
        minus = f()
        x[idx] = old
        g[idx] = (plus - minus) / (2 * eps)
    return g


def test_gae_single_terminal_step():
    adv, ret = gae(np.array([2.5]), np.array([0.0]), np.array([True]), 0.995, 0.95)
    assert_allclose(adv, [2.5])
    assert_allclose(ret, [2.5])


def test_gae_two_steps():
    adv, _ = gae(np.array([1.0, 1.0]), np.zeros(2), np.array([False, True]), 0.995, 0.95)
    assert_allclose(adv, [1.94525, 1.0])


def test_gae_bootstraps_from_last_value():
    adv, _ = gae(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2), dtype=bool), 0.5, 0.9, last_value=np.array([2.0, 4.0]))
    assert_allclose(adv[0], [1.0, 2.0])


def test_normalize_advantages():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0]))
    assert out.mean() == pytest.approx(0.0)
    assert out.std() == pytest.approx(1.0)
    assert_allclose(normalize_advantages(np.zeros(4)), 0.0)


def test_identical_policies_give_unit_ratio():
    logp = np.log(np.array([0.2, 0.5, 0.3]))
    adv = np.array([1.0, -1.0, 0.5])
    _, d_logp, _, _, stats = ppo_loss_gradients(logp, logp, adv, np.zeros(3), np.zeros(3), 0.2, 0.5, 0.0, np.zeros(3))
    assert stats["kl"] == pytest.approx(0.0)
    assert stats["clip_frac"] == 0.0
    assert stats["max_ratio_error"] == 0.0
    assert_allclose(d_logp, -adv / 3)


def test_clipped_samples_have_no_policy_gradient():
    old = np.zeros(2)
    logp = np.log(np.array([1.5, 0.5]))
    _, d_logp, _, _, stats = ppo_loss_gradients(logp, old, np.array([1.0, -1.0]), np.zeros(2), np.zeros(2), 0.2, 0.5, 0.0, np.zeros(2))
    assert_allclose(d_logp, 0.0)
    assert stats["clip_frac"] == 1.0


def test_zero_advantages_leave_parameters_unchanged():
    policy = TaskPolicy.create(4, 3, hidden=(8,), seed=0)
    obs = np.random.default_rng(0).normal(size=(6, 4))
    actions = np.array([0, 1, 2, 0, 1, 2])
    logp, entropy, values, cache = policy.evaluate(obs, actions)
    _, d_logp, d_ent, d_val, _ = ppo_loss_gradients(logp, logp, np.zeros(6), values, values, 0.2, 0.5, 0.0, entropy)
    grads = policy.gradients(cache, d_logp, d_ent, d_val)
    before = policy.digest()
    Adam(policy.parameters(), lr=1e-2, max_grad_norm=0.5).step(grads)
    assert policy.digest() == before


def test_categorical_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    policy = TaskPolicy.create(3, 4, hidden=(5,), seed=1)
    obs = rng.normal(size=(5, 3))
    actions = rng.integers(0, 4, size=5)
    w = rng.normal(size=(3, 5))

    def loss():
        logp, entropy, values, _ = policy.evaluate(obs, actions)
        return float(w[0] @ logp + w[1] @ entropy + w[2] @ values)

    _, _, _, cache = policy.evaluate(obs, actions)
    grads = policy.gradients(cache, w[0], w[1], w[2])
    params = policy.parameters()
    for key in ("policy/out.weight", "policy/fc0.weight", "value/out.bias"):
        assert_allclose(grads[key], numeric_gradient(loss, params[key]), rtol=1e-4, atol=1e-7)


def test_gaussian_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    policy = GaussianPolicy.create(3, action_size=2, hidden=(4,), seed=2)
    obs = rng.normal(size=(4, 3))
    actions = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 4))

    def loss():
        logp, entropy, values, _ = policy.evaluate(obs, actions)
        return float(w[0] @ logp + w[1] @ entropy + w[2] @ values)

    _, _, _, cache = policy.evaluate(obs, actions)
    grads = policy.gradients(cache, w[0], w[1], w[2])
    params = policy.parameters()
    for key in ("policy/out.weight", "log_std"):
        assert_allclose(grads[key], numeric_gradient(loss, params[key]), rtol=1e-4, atol=1e-7)


def test_ee_space_command_clamps():
    cmd = ee_space_command(np.array([0.1, 0.0, -0.001, 0.0, 0.0, -1.0, 0.3]))
    assert_allclose(cmd.delta_translation, [0.02, 0.0, -0.001])
    assert_allclose(cmd.delta_rotation.rotvec, [0.0, 0.0, -EE_MAX_ROTATION])
    assert cmd.gripper is GripperAction.CLOSE
    assert ee_space_command(np.zeros(7)).gripper is GripperAction.OPEN


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip=1.5)
    with pytest.raises(ValueError):
        PpoConfig(num_envs=0)
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.1)
    assert PpoConfig(num_steps=10, num_envs=3).batch_size == 30


def test_entropy_anneal():
    config = PpoConfig(entropy_coef=0.1, entropy_coef_final=0.01)
    assert config.entropy_at(0.0) == pytest.approx(0.1)
    assert config.entropy_at(0.5) == pytest.approx(0.055)
    assert config.entropy_at(2.0) == pytest.approx(0.01)
    assert PpoConfig(entropy_coef=0.1).entropy_at(0.7) == pytest.approx(0.1)


@pytest.mark.parametrize("kind", ["categorical", "gaussian"])
def test_policy_save_load(tmp_path, kind):
    if kind == "categorical":
        policy = TaskPolicy.create(5, 3, hidden=(8,), seed=4)
    else:
        policy = GaussianPolicy.create(5, hidden=(8,), seed=4)
        policy.log_std[:] = -1.25
    policy.save(tmp_path / "policy")
    loaded = load_policy(tmp_path / "policy")
    assert type(loaded) is type(policy)
    assert loaded.digest() == policy.digest()
    assert loaded.action_size == policy.action_size
    obs = np.random.default_rng(0).normal(size=(2, 5))
    assert_allclose(loaded.values(obs), policy.values(obs))


def rollout(seed):
    venv = VectorEnv("button", 2, ControllerActions(semantic_provider), seed, SimConfig(horizon=4))
    policy = TaskPolicy.create(venv.observation_size, 14, hidden=(8,), seed=seed)
    return venv, collect_rollouts(policy, venv, 6, np.random.default_rng(seed))


def test_rollouts_are_deterministic():
    venv_a, a = rollout(3)
    venv_b, b = rollout(3)
    assert_array_equal(a.actions, b.actions)
    assert_allclose(a.rewards, b.rewards)
    assert_allclose(a.observations, b.observations)
    assert venv_a.used_seeds == venv_b.used_seeds
    assert all(0 <= s < 1_000_000 for s in venv_a.used_seeds)


def test_rollout_horizon_ends_episodes():
    _, batch = rollout(5)
    assert batch.dones[3].all()
    assert len(batch.episode_returns) + batch.dropped >= 2


def test_ppo_update_runs_on_rollout():
    config = PpoConfig(num_steps=6, num_envs=2, minibatches=3, epochs=2, hidden=(8,))
    venv, batch = rollout(6)
    policy = TaskPolicy.create(venv.observation_size, 14, hidden=(8,), seed=6)
    finish_batch(batch, config)
    before = policy.digest()
    metrics = ppo_update(policy, Adam(policy.parameters(), lr=config.lr), batch, config, np.random.default_rng(0))
    assert policy.digest() != before
    assert np.isfinite(metrics["loss"])
    assert metrics["entropy"] == pytest.approx(np.log(14), rel=1e-2)


def test_batch_without_advantages():
    _, batch = rollout(7)
    with pytest.raises(PpoError):
        batch.flat()


class FailingActions(EESpaceActions):
    def __init__(self):
        self.calls = 0

    def command(self, index, action, extra=None):
        self.calls += 1
        if index == 0 and self.calls == 1:
            raise SimulationError("contact solver diverged")
        return super().command(index, action, extra)


class RecordingObserver(BaseTrainingObserver):
    def __init__(self):
        self.failures = []

    def on_worker_failure(self, env_index, message):
        self.failures.append(env_index)


def test_env_fault_drops_episode():
    observer = RecordingObserver()
    venv = VectorEnv("button", 2, FailingActions(), 0, observer=observer)
    venv.reset()
    out = venv.step(np.zeros((2, 7)))
    assert_array_equal(out.dropped, [True, False])
    assert_array_equal(out.dones, [True, False])
    assert out.rewards[0] == 0.0
    assert observer.failures == [0]
    assert len(venv.used_seeds) == 3


def test_dropped_episodes_are_not_counted():
    venv = VectorEnv("button", 2, FailingActions(), 0)
    policy = GaussianPolicy.create(venv.observation_size, hidden=(8,), seed=0)
    batch = collect_rollouts(policy, venv, 2, np.random.default_rng(0))
    assert batch.dropped == 1
    assert batch.episode_returns == []


def test_run_episode_checks_action_count():
    env = TaskEnv("button", SimConfig(horizon=2))
    env.reset(1_000_001)
    actions = ControllerActions(semantic_provider)
    actions.on_reset(0, env)
    with pytest.raises(PpoError):
        run_episode(env, TaskPolicy.create(env.observation_size, 3, hidden=(8,)), actions)
    result = run_episode(env, TaskPolicy.create(env.observation_size, 14, hidden=(8,)), actions)
    assert result.steps <= 2


def test_controller_action_out_of_range():
    env = TaskEnv("button")
    env.reset(0)
    actions = ControllerActions(semantic_provider)
    actions.on_reset(0, env)
    with pytest.raises(PpoError):
        actions.command(0, 14)


def brute_force_gae(rewards, values, dones, gamma, lam, last_value):
    T = len(rewards)
    next_values = np.append(values[1:], last_value)
    deltas = rewards + gamma * next_values * (1.0 - dones) - values
    out = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for k in range(t, T):
            out[t] += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
    return out


@given(
    st.integers(min_value=1, max_value=30).flatmap(
        lambda n: st.tuples(
            st.lists(st.floats(-5, 5), min_size=n, max_size=n),
            st.lists(st.floats(-5, 5), min_size=n, max_size=n),
            st.lists(st.booleans(), min_size=n, max_size=n),
        )
    ),
    st.floats(-5, 5),
)
def test_gae_matches_brute_force(data, last_value):
    rewards, values, dones = (np.array(x, dtype=float) for x in data)
    adv, ret = gae(rewards, values, dones, 0.995, 0.95, last_value)
    assert_allclose(adv, brute_force_gae(rewards, values, dones, 0.995, 0.95, last_value), rtol=0, atol=1e-10)
    assert_allclose(ret, adv + values)


def test_ee_space_policy_is_deterministic_and_clamped():
    policy = GaussianPolicy.create(5, hidden=(8,), seed=0)
    policy.parameters()["policy/out.bias"][:] = [1.0, -1.0, 0.0, 0.0, 0.2, 0.0, 0.5]
    obs = np.zeros(5)
    action = ee_space_policy(policy, obs)
    assert_allclose(action, ee_space_policy(policy, obs))
    assert action.shape == (7,)
    assert np.all(np.abs(action[:3]) <= 0.02 + 1e-12)
    assert np.all(np.abs(action[3:6]) <= EE_MAX_ROTATION + 1e-12)
    assert action[6] == 1.0


def test_top_k_composition_respects_step_limit():
    ee = ee_from_joints(HOME_Q)
    specs = tuple(
        ControllerSpec(ControllerKind.POSITION_FIXED_AXIS, target_point=ee.position + axis, axis=axis)
        for axis in np.eye(3)
    )
    actions = ControllerActions(lambda env: ControllerSet(specs, TaskFamily.BUTTON, 0), top_k=3)
    actions.on_reset(0, None)
    cmd = actions.command(0, 1, extra=np.array([0.2, 0.5, 0.3]))(ee)
    assert np.linalg.norm(cmd.delta_translation) == pytest.approx(0.01)
    assert_allclose(cmd.delta_translation, np.full(3, 0.01 / np.sqrt(3)))
