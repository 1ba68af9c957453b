"""Environment contracts: determinism, reward consistency, documented dynamics."""

import math

import numpy as np
import pytest

from poplin import envs
from poplin.envs import EnvState, Pendulum, make_env
from poplin.errors import ConfigError, UsageError

ENV_IDS = ["pendulum", "cartpole", "reacher2d"]


def angle_of(obs, cos_idx, sin_idx):
    return math.atan2(obs[sin_idx], obs[cos_idx])


class TestReset:
    def test_pendulum_starts_hanging(self):
        obs = envs.reset("pendulum", seed=0).observation
        theta = angle_of(obs, 0, 1)
        assert abs(abs(theta) - math.pi) <= 0.05
        assert abs(obs[2]) <= 0.05

    def test_cartpole_starts_hanging(self):
        obs = envs.reset("cartpole", seed=0).observation
        assert abs(obs[0]) <= 0.05
        theta = angle_of(obs, 2, 3)
        assert abs(abs(theta) - math.pi) <= 0.05

    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_same_seed_bitwise_identical(self, env_id):
        a = envs.reset(env_id, seed=123).observation
        b = envs.reset(env_id, seed=123).observation
        assert np.array_equal(a, b)
        c = envs.reset(env_id, seed=124).observation
        assert not np.array_equal(a, c)

    def test_unknown_env_id(self):
        with pytest.raises(ConfigError):
            envs.reset("mujoco_ant", seed=0)

    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_initial_flags(self, env_id):
        state = envs.reset(env_id, seed=5)
        assert state.step_index == 0
        assert not state.done


class TestStep:
    def test_pendulum_upright_is_fixed_point(self):
        env = make_env("pendulum")
        upright = EnvState(np.array([1.0, 0.0, 0.0]))
        nxt, reward = env.step(upright, np.array([0.0]))
        assert np.max(np.abs(nxt.observation - upright.observation)) <= 1e-6
        assert reward == 0.0  # all penalty terms vanish at the target

    def test_cartpole_hanging_rest_is_equilibrium(self):
        env = make_env("cartpole")
        hanging = EnvState(np.array([0.0, 0.0, -1.0, 0.0, 0.0]))
        nxt, _ = env.step(hanging, np.array([0.0]))
        assert np.max(np.abs(nxt.observation - hanging.observation)) <= 1e-6

    def test_pendulum_max_torque_one_step_hand_integration(self):
        # independent semi-implicit Euler step of the documented ODE:
        # thdd = 1.5*g/l*sin(th) + 3/(m*l^2)*u - damping*thd
        env = make_env("pendulum")
        th, thd, u = math.pi, 0.0, Pendulum.MAX_TORQUE
        thdd = (
            1.5 * Pendulum.GRAVITY / Pendulum.LENGTH * math.sin(th)
            + 3.0 / (Pendulum.MASS * Pendulum.LENGTH**2) * u
            - Pendulum.DAMPING * thd
        )
        new_thd = thd + env.spec.dt * thdd
        new_th = th + env.spec.dt * new_thd
        state = EnvState(np.array([math.cos(th), math.sin(th), thd]))
        nxt, _ = env.step(state, np.array([u]))
        expected = np.array([math.cos(new_th), math.sin(new_th), new_thd])
        assert np.max(np.abs(nxt.observation - expected)) <= 1e-12

    def test_step_done_state_raises(self):
        env = make_env("pendulum")
        done = EnvState(np.array([1.0, 0.0, 0.0]), step_index=200, done=True)
        with pytest.raises(UsageError):
            env.step(done, np.array([0.0]))

    def test_out_of_bounds_action_raises(self):
        env = make_env("pendulum")
        state = env.reset(0)
        with pytest.raises(UsageError):
            env.step(state, np.array([env.spec.action_high[0] + 0.5]))

    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_step_is_pure(self, env_id):
        env = make_env(env_id)
        state = env.reset(7)
        action = 0.5 * env.spec.action_high
        n1, r1 = env.step(state, action)
        n2, r2 = env.step(state, action)
        assert np.array_equal(n1.observation, n2.observation)
        assert r1 == r2


def random_observation(env_id, rng):
    if env_id == "pendulum":
        th = rng.uniform(-math.pi, math.pi)
        return np.array([math.cos(th), math.sin(th), rng.uniform(-8, 8)])
    if env_id == "cartpole":
        th = rng.uniform(-math.pi, math.pi)
        return np.array(
            [rng.uniform(-2, 2), rng.uniform(-3, 3), math.cos(th), math.sin(th), rng.uniform(-8, 8)]
        )
    q1, q2 = rng.uniform(-math.pi, math.pi, 2)
    return np.array(
        [math.cos(q1), math.sin(q1), math.cos(q2), math.sin(q2),
         rng.uniform(-4, 4), rng.uniform(-4, 4)]
    )


class TestReward:
    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_step_reward_matches_reward_fn(self, env_id):
        env = make_env(env_id)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            obs = random_observation(env_id, rng)
            action = rng.uniform(env.spec.action_low, env.spec.action_high)
            _, reward = env.step(EnvState(obs), action)
            assert reward == float(env.reward(obs, action))

    def test_cartpole_hanging_worse_than_upright(self):
        env = make_env("cartpole")
        hanging = np.array([0.0, 0.0, -1.0, 0.0, 0.0])
        upright = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
        zero = np.array([0.0])
        assert env.reward(hanging, zero) < env.reward(upright, zero)

    def test_pendulum_reward_is_cost_form(self):
        env = make_env("pendulum")
        obs = np.array([math.cos(1.0), math.sin(1.0), 2.0])
        action = np.array([0.5])
        expected = -(1.0**2 + 0.1 * 2.0**2 + 0.001 * 0.5**2)
        assert abs(env.reward(obs, action) - expected) < 1e-12

    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_reward_vectorizes(self, env_id):
        env = make_env(env_id)
        rng = np.random.default_rng(3)
        obs = np.stack([random_observation(env_id, rng) for _ in range(8)])
        acts = rng.uniform(env.spec.action_low, env.spec.action_high, (8, env.spec.action_dim))
        batch = env.reward(obs, acts)
        for i in range(8):
            assert batch[i] == env.reward(obs[i], acts[i])


class TestBoundedness:
    @pytest.mark.parametrize("env_id", ENV_IDS)
    def test_full_horizon_random_rollout_stays_finite(self, env_id):
        env = make_env(env_id)
        rng = np.random.default_rng(11)
        state = env.reset(11)
        while not state.done:
            action = rng.uniform(env.spec.action_low, env.spec.action_high)
            state, reward = env.step(state, action)
            assert np.all(np.isfinite(state.observation))
            assert np.isfinite(reward)
        assert state.step_index == env.spec.horizon
