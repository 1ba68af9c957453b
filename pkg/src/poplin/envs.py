"""Analytic control environments with known reward functions.

Three deterministic tasks (pendulum swing-up, cartpole swing-up, 2-link
planar reacher) with closed-form equations of motion, integrated by
semi-implicit Euler. Angles are exposed as (cos, sin) pairs so learned
models never see a wrap-around discontinuity. The reward is a pure
function of (observation, action) and is shared verbatim between the
real environment and the planner's imagined rollouts.

Equations of motion and reward coefficients are documented in
docs/environments.md.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError

INIT_NOISE = 0.05  # uniform half-width of seed-driven reset noise


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    dt: float

    def __post_init__(self):
        if not np.all(self.action_low < self.action_high):
            raise ConfigError("action_low must be < action_high elementwise")
        if self.horizon < 1 or self.dt <= 0:
            raise ConfigError("horizon must be >= 1 and dt > 0")


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    step_index: int = 0
    done: bool = False


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float


class Env:
    """Immutable-spec environment; state is passed by value through step."""

    spec: EnvSpec

    def reset(self, seed: int) -> EnvState:
        obs = self._initial_observation(np.random.default_rng(seed))
        return EnvState(observation=obs, step_index=0, done=False)

    def step(self, state: EnvState, action: np.ndarray) -> tuple[EnvState, float]:
        if state.done:
            raise UsageError("cannot step a done state")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise UsageError(f"action shape {action.shape} != ({self.spec.action_dim},)")
        if np.any(action < self.spec.action_low) or np.any(action > self.spec.action_high):
            raise UsageError("action outside bounds; clip before calling step")
        r = float(self.reward(state.observation, action))
        nxt = self.transition(state.observation, action)
        idx = state.step_index + 1
        return EnvState(observation=nxt, step_index=idx, done=idx >= self.spec.horizon), r

    def transition(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Pure dynamics map, vectorized over leading batch dimensions."""
        raise NotImplementedError

    def reward(self, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Pure reward, vectorized over leading batch dimensions."""
        raise NotImplementedError

    def _initial_observation(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class Pendulum(Env):
    """Torque-limited pendulum swing-up.

    Observation [cos th, sin th, thd] with th = 0 upright. The pole starts
    hanging down (th = pi) at rest and must be swung up and balanced.
    """

    GRAVITY = 10.0
    MASS = 1.0
    LENGTH = 1.0
    DAMPING = 0.1
    MAX_TORQUE = 2.0

    def __init__(self):
        self.spec = EnvSpec(
            state_dim=3,
            action_dim=1,
            action_low=np.array([-self.MAX_TORQUE]),
            action_high=np.array([self.MAX_TORQUE]),
            horizon=200,
            dt=0.05,
        )

    def transition(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        cos_th, sin_th, thd = obs[..., 0], obs[..., 1], obs[..., 2]
        th = np.arctan2(sin_th, cos_th)
        inertia = self.MASS * self.LENGTH**2
        thdd = (
            1.5 * self.GRAVITY / self.LENGTH * sin_th
            + 3.0 / inertia * action[..., 0]
            - self.DAMPING * thd
        )
        new_thd = thd + self.spec.dt * thdd
        new_th = th + self.spec.dt * new_thd
        return np.stack([np.cos(new_th), np.sin(new_th), new_thd], axis=-1)

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        th = np.arctan2(obs[..., 1], obs[..., 0])
        return -(th**2 + 0.1 * obs[..., 2] ** 2 + 0.001 * action[..., 0] ** 2)

    def _initial_observation(self, rng):
        th = np.pi + rng.uniform(-INIT_NOISE, INIT_NOISE)
        thd = rng.uniform(-INIT_NOISE, INIT_NOISE)
        return np.array([np.cos(th), np.sin(th), thd])


class Cartpole(Env):
    """Cartpole swing-up: pole starts hanging, reward peaks with the pole
    tip held at its upright target above a centered cart.

    Observation [x, xd, cos th, sin th, thd] with th = 0 upright.
    """

    GRAVITY = 9.81
    MASS_CART = 1.0
    MASS_POLE = 0.1
    POLE_LENGTH = 0.6  # pivot-to-tip
    CART_DAMPING = 0.1
    POLE_DAMPING = 0.01
    MAX_FORCE = 12.0

    def __init__(self):
        self.spec = EnvSpec(
            state_dim=5,
            action_dim=1,
            action_low=np.array([-self.MAX_FORCE]),
            action_high=np.array([self.MAX_FORCE]),
            horizon=200,
            dt=0.05,
        )

    def transition(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        x, xd = obs[..., 0], obs[..., 1]
        cos_th, sin_th, thd = obs[..., 2], obs[..., 3], obs[..., 4]
        th = np.arctan2(sin_th, cos_th)
        force = action[..., 0]
        total = self.MASS_CART + self.MASS_POLE
        ml = self.MASS_POLE * self.POLE_LENGTH
        tmp = (force + ml * thd**2 * sin_th - self.CART_DAMPING * xd) / total
        thdd = (
            self.GRAVITY * sin_th - cos_th * tmp - self.POLE_DAMPING * thd / ml
        ) / (self.POLE_LENGTH * (4.0 / 3.0 - self.MASS_POLE * cos_th**2 / total))
        xdd = tmp - ml * thdd * cos_th / total
        dt = self.spec.dt
        new_xd = xd + dt * xdd
        new_x = x + dt * new_xd
        new_thd = thd + dt * thdd
        new_th = th + dt * new_thd
        return np.stack(
            [new_x, new_xd, np.cos(new_th), np.sin(new_th), new_thd], axis=-1
        )

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        x, cos_th, sin_th = obs[..., 0], obs[..., 2], obs[..., 3]
        tip_x = x + self.POLE_LENGTH * sin_th
        tip_y = self.POLE_LENGTH * cos_th
        dist_sq = tip_x**2 + (tip_y - self.POLE_LENGTH) ** 2
        return np.exp(-dist_sq / self.POLE_LENGTH**2) - 0.001 * action[..., 0] ** 2

    def _initial_observation(self, rng):
        x = rng.uniform(-INIT_NOISE, INIT_NOISE)
        th = np.pi + rng.uniform(-INIT_NOISE, INIT_NOISE)
        thd = rng.uniform(-INIT_NOISE, INIT_NOISE)
        return np.array([x, 0.0, np.cos(th), np.sin(th), thd])


class Reacher2D(Env):
    """Planar 2-link reacher: independently damped torque-driven joints,
    fingertip must reach a fixed target.

    Observation [cos q1, sin q1, cos q2, sin q2, q1d, q2d].
    """

    LINK1 = 0.5
    LINK2 = 0.5
    DAMPING = 0.5
    TARGET = np.array([0.0, 0.7])
    MAX_TORQUE = 1.0

    def __init__(self):
        self.spec = EnvSpec(
            state_dim=6,
            action_dim=2,
            action_low=np.array([-self.MAX_TORQUE, -self.MAX_TORQUE]),
            action_high=np.array([self.MAX_TORQUE, self.MAX_TORQUE]),
            horizon=100,
            dt=0.05,
        )

    def transition(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        q1 = np.arctan2(obs[..., 1], obs[..., 0])
        q2 = np.arctan2(obs[..., 3], obs[..., 2])
        qd = obs[..., 4:6]
        qdd = action - self.DAMPING * qd
        dt = self.spec.dt
        new_qd = qd + dt * qdd
        new_q1 = q1 + dt * new_qd[..., 0]
        new_q2 = q2 + dt * new_qd[..., 1]
        return np.stack(
            [
                np.cos(new_q1),
                np.sin(new_q1),
                np.cos(new_q2),
                np.sin(new_q2),
                new_qd[..., 0],
                new_qd[..., 1],
            ],
            axis=-1,
        )

    def reward(self, obs, action):
        obs = np.asarray(obs, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        c1, s1, c2, s2 = obs[..., 0], obs[..., 1], obs[..., 2], obs[..., 3]
        # angle-sum identities keep this smooth in the observation
        c12 = c1 * c2 - s1 * s2
        s12 = s1 * c2 + c1 * s2
        tip_x = self.LINK1 * c1 + self.LINK2 * c12
        tip_y = self.LINK1 * s1 + self.LINK2 * s12
        dist_sq = (tip_x - self.TARGET[0]) ** 2 + (tip_y - self.TARGET[1]) ** 2
        return -(dist_sq + 0.001 * np.sum(action**2, axis=-1))

    def _initial_observation(self, rng):
        q = rng.uniform(-INIT_NOISE, INIT_NOISE, size=2)
        qd = rng.uniform(-INIT_NOISE, INIT_NOISE, size=2)
        return np.array([np.cos(q[0]), np.sin(q[0]), np.cos(q[1]), np.sin(q[1]), qd[0], qd[1]])


_REGISTRY = {"pendulum": Pendulum, "cartpole": Cartpole, "reacher2d": Reacher2D}


def make_env(env_id: str) -> Env:
    try:
        return _REGISTRY[env_id]()
    except KeyError:
        raise ConfigError(
            f"unknown env_id {env_id!r}; expected one of {sorted(_REGISTRY)}"
        ) from None


def reset(env_id: str, seed: int) -> EnvState:
    return make_env(env_id).reset(seed)
