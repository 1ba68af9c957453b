"""Ensemble transition models and imagined-rollout scoring.

Each ensemble member is an MLP mapping normalized [state; action] to the
normalized state delta; probabilistic members add a log-variance head
trained with Gaussian NLL (log-variances soft-clamped to trainable
bounds, PETS-style). Rollouts propagate the mean over members — the
expectation mode — so a candidate's imagined trajectory and return are
deterministic functions of the ensemble snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .errors import ConfigError, UsageError
from .net import AdamState, FlatParams, MlpShape

STD_FLOOR = 1e-6
LOGVAR_BOUND_PENALTY = 0.01


@dataclass(frozen=True)
class Normalizer:
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray


def _identity_normalizer(in_dim: int, out_dim: int) -> Normalizer:
    return Normalizer(
        np.zeros(in_dim), np.ones(in_dim), np.zeros(out_dim), np.ones(out_dim)
    )


class TransitionDataset:
    """Replay data: transitions, optimized-noise records, and optional
    hallucinated (imagined state, planned action) pairs.

    Transitions collected under the planner are flagged `planned` so
    distillation can skip the initial random-exploration phase.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int | None = None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = capacity
        self._states: list[np.ndarray] = []
        self._actions: list[np.ndarray] = []
        self._next_states: list[np.ndarray] = []
        self._rewards: list[float] = []
        self._planned: list[bool] = []
        self.noise_records: list[tuple[np.ndarray, np.ndarray]] = []
        self.hallucinated: list[tuple[np.ndarray, np.ndarray]] = []

    def __len__(self) -> int:
        return len(self._states)

    def add(self, state, action, next_state, reward: float, planned: bool = False):
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        next_state = np.asarray(next_state, dtype=np.float64)
        if state.shape != (self.state_dim,) or next_state.shape != (self.state_dim,):
            raise UsageError("state dimension mismatch")
        if action.shape != (self.action_dim,):
            raise UsageError("action dimension mismatch")
        self._states.append(state)
        self._actions.append(action)
        self._next_states.append(next_state)
        self._rewards.append(float(reward))
        self._planned.append(planned)
        if self.capacity is not None and len(self._states) > self.capacity:
            for lst in (self._states, self._actions, self._next_states,
                        self._rewards, self._planned):
                del lst[0]

    def add_noise_record(self, state: np.ndarray, noise: np.ndarray):
        self.noise_records.append(
            (np.asarray(state, dtype=np.float64), np.asarray(noise, dtype=np.float64))
        )

    def add_hallucinated(self, state: np.ndarray, action: np.ndarray):
        self.hallucinated.append(
            (np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64))
        )

    def states(self) -> np.ndarray:
        return np.array(self._states).reshape(len(self), self.state_dim)

    def actions(self) -> np.ndarray:
        return np.array(self._actions).reshape(len(self), self.action_dim)

    def next_states(self) -> np.ndarray:
        return np.array(self._next_states).reshape(len(self), self.state_dim)

    def rewards(self) -> np.ndarray:
        return np.array(self._rewards)

    def planned_mask(self) -> np.ndarray:
        return np.array(self._planned, dtype=bool)


@dataclass
class DynamicsEnsemble:
    """Snapshot of B members sharing one shape and one normalizer."""

    members: list[FlatParams]
    normalizer: Normalizer
    state_dim: int
    action_dim: int
    mode: str = "probabilistic"  # or "deterministic"
    min_logvar: np.ndarray | None = None
    max_logvar: np.ndarray | None = None
    loss_history: list[tuple[int, int, float]] = field(default_factory=list)
    _stacked: list | None = field(default=None, repr=False, compare=False)

    def stacked_layers(self):
        """Member weights stacked per layer as [(W^T (B, in, out), b (B, 1, out))],
        ready for batched matmul. Lazily built; training returns fresh
        snapshots, so the cache never goes stale."""
        if self._stacked is None:
            per_member = [net.unflatten(m) for m in self.members]
            self._stacked = [
                (
                    np.ascontiguousarray(
                        np.stack([pm[layer][0] for pm in per_member]).transpose(0, 2, 1)
                    ),
                    np.stack([pm[layer][1] for pm in per_member])[:, None, :],
                )
                for layer in range(len(per_member[0]))
            ]
        return self._stacked


def make_ensemble(
    state_dim: int,
    action_dim: int,
    members: int = 5,
    hidden: tuple[int, ...] = (64, 64),
    mode: str = "probabilistic",
    seed: int = 0,
) -> DynamicsEnsemble:
    if members < 1:
        raise ConfigError("ensemble needs at least one member")
    if mode not in ("probabilistic", "deterministic"):
        raise ConfigError(f"unknown ensemble mode {mode!r}")
    out_dim = 2 * state_dim if mode == "probabilistic" else state_dim
    shape = MlpShape((state_dim + action_dim,) + tuple(hidden) + (out_dim,), "swish")
    params = [net.init_params(shape, seed + i) for i in range(members)]
    ens = DynamicsEnsemble(
        members=params,
        normalizer=_identity_normalizer(state_dim + action_dim, state_dim),
        state_dim=state_dim,
        action_dim=action_dim,
        mode=mode,
    )
    if mode == "probabilistic":
        ens.min_logvar = np.full(state_dim, -10.0)
        ens.max_logvar = np.full(state_dim, 0.5)
    return ens


class TrueDynamics:
    """Analytic-environment stand-in for a learned ensemble.

    Exposes the same predict contract, so planners and expected_return can
    be run against the ground-truth transition function in tests and
    analysis.
    """

    def __init__(self, env):
        self.env = env
        self.state_dim = env.spec.state_dim
        self.action_dim = env.spec.action_dim

    def predict(self, state, action):
        return self.env.transition(state, action)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _clamp_logvar(raw, min_lv, max_lv):
    lv = max_lv - _softplus(max_lv - raw)
    return min_lv + _softplus(lv - min_lv)


def predict(ensemble, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Next state as state + mean over members of the de-normalized delta.

    Accepts a single (state, action) pair or (N, dim) batches. In
    probabilistic mode only the mean head is used (expectation
    propagation; no sampling anywhere).
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
        raise UsageError("non-finite inputs to predict")
    if isinstance(ensemble, TrueDynamics):
        return ensemble.predict(state, action)
    norm = ensemble.normalizer
    x = np.concatenate([state, action], axis=-1)
    single = x.ndim == 1
    z = np.atleast_2d((x - norm.in_mean) / norm.in_std)
    layers = ensemble.stacked_layers()
    act = ensemble.members[0].shape.activation
    w_t, b = layers[0]
    h = np.matmul(z, w_t) + b  # broadcasts to (B, K, out)
    for li in range(1, len(layers)):
        h = _activate_stack(h, act)
        w_t, b = layers[li]
        h = np.matmul(h, w_t) + b
    out = h.mean(axis=0)
    mean_norm = out[:, : ensemble.state_dim]
    delta = mean_norm * norm.out_std + norm.out_mean
    return state + (delta[0] if single else delta)


def _activate_stack(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig


def expected_return(model, reward_fn, start_state, action_provider, horizon: int) -> float:
    """Undiscounted sum of rewards along the model's imagined rollout.

    action_provider(t, state) supplies the action at imagined step t. A
    non-finite imagined state disqualifies the rollout with a -inf return
    instead of raising.
    """
    state = np.asarray(start_state, dtype=np.float64)
    total = 0.0
    for t in range(horizon):
        action = np.asarray(action_provider(t, state), dtype=np.float64)
        total += float(reward_fn(state, action))
        state = _advance(model, state, action)
        if not np.all(np.isfinite(state)):
            return float("-inf")
    return total


def rollout_plan(model, reward_fn, start_state, action_provider, horizon: int):
    """Single imagined rollout, returning (states, actions, rewards).

    states has horizon+1 rows (including the start state); used for
    hallucinated distillation data and candidate dumps.
    """
    state = np.asarray(start_state, dtype=np.float64)
    states = [state]
    actions = []
    rewards = []
    for t in range(horizon):
        action = np.asarray(action_provider(t, state), dtype=np.float64)
        actions.append(action)
        rewards.append(float(reward_fn(state, action)))
        state = _advance(model, state, action)
        states.append(state)
        if not np.all(np.isfinite(state)):
            break
    return np.array(states), np.array(actions), np.array(rewards)


def _advance(model, state, action):
    if isinstance(model, DynamicsEnsemble):
        return predict(model, state, action)
    return model.predict(state, action)


def batch_expected_returns(
    model, reward_fn, start_state, batch_action_provider, horizon: int, population: int
) -> np.ndarray:
    """Vectorized expected_return over a population of candidates.

    batch_action_provider(t, states) maps (K, state_dim) imagined states
    to (K, action_dim) actions for candidate-specific behavior. Rows that
    leave the finite range are frozen and scored -inf.
    """
    states = np.repeat(np.asarray(start_state, dtype=np.float64)[None, :], population, axis=0)
    returns = np.zeros(population)
    alive = np.ones(population, dtype=bool)
    for t in range(horizon):
        actions = batch_action_provider(t, states)
        rewards = reward_fn(states, actions)
        returns = np.where(alive, returns + rewards, returns)
        states = _advance(model, states, actions)
        bad = ~np.all(np.isfinite(states), axis=-1)
        if np.any(bad):
            alive &= ~bad
            states = np.where(np.isfinite(states), states, 0.0)
        if not np.any(alive):
            break
    returns[~alive] = -np.inf
    return returns


def _bootstrap_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=n)


def refit_normalizer(ensemble: DynamicsEnsemble, data: TransitionDataset) -> Normalizer:
    inputs = np.concatenate([data.states(), data.actions()], axis=1)
    deltas = data.next_states() - data.states()
    return Normalizer(
        in_mean=inputs.mean(axis=0),
        in_std=np.maximum(inputs.std(axis=0), STD_FLOOR),
        out_mean=deltas.mean(axis=0),
        out_std=np.maximum(deltas.std(axis=0), STD_FLOOR),
    )


def train_dynamics(
    ensemble: DynamicsEnsemble,
    data: TransitionDataset,
    epochs: int,
    batch: int,
    seed: int,
    learning_rate: float = 1e-3,
) -> DynamicsEnsemble:
    """Refit the normalizer and train every member on its own bootstrap
    resample of the data. Returns a new ensemble snapshot; the input is
    left untouched.
    """
    if len(data) == 0:
        raise UsageError("cannot train on an empty dataset")
    norm = refit_normalizer(ensemble, data)
    inputs = np.concatenate([data.states(), data.actions()], axis=1)
    z_all = (inputs - norm.in_mean) / norm.in_std
    deltas = data.next_states() - data.states()
    t_all = (deltas - norm.out_mean) / norm.out_std

    prob = ensemble.mode == "probabilistic"
    new_members = []
    min_lv = None if not prob else ensemble.min_logvar.copy()
    max_lv = None if not prob else ensemble.max_logvar.copy()
    history = list(ensemble.loss_history)
    base_epoch = max((e for e, _, _ in history), default=-1) + 1

    opt_states = []
    bound_opts = []
    member_idx = []
    rng = np.random.default_rng(seed)
    for m, member in enumerate(ensemble.members):
        idx = _bootstrap_indices(len(data), rng)
        member_idx.append(idx)
        new_members.append(FlatParams(member.values.copy(), member.shape))
        opt_states.append(net.adam_init(len(member.values), learning_rate))
        if prob:
            bound_opts.append(
                (net.adam_init(ensemble.state_dim, learning_rate),
                 net.adam_init(ensemble.state_dim, learning_rate))
            )

    for epoch in range(epochs):
        for m in range(len(new_members)):
            idx = member_idx[m]
            order = rng.permutation(len(idx))
            losses = []
            for start in range(0, len(order), batch):
                rows = idx[order[start : start + batch]]
                zb, tb = z_all[rows], t_all[rows]
                if prob:
                    loss, grad, gmin, gmax = _nll_step(
                        new_members[m], zb, tb, min_lv, max_lv
                    )
                    opt_states[m], new_members[m] = net.adam_step(
                        opt_states[m], new_members[m], grad
                    )
                    omin, omax = bound_opts[m]
                    omin, min_lv = net.adam_step_vec(omin, min_lv, gmin)
                    omax, max_lv = net.adam_step_vec(omax, max_lv, gmax)
                    bound_opts[m] = (omin, omax)
                else:
                    loss, grad = _mse_step(new_members[m], zb, tb)
                    opt_states[m], new_members[m] = net.adam_step(
                        opt_states[m], new_members[m], grad
                    )
                losses.append(loss)
            history.append((base_epoch + epoch, m, float(np.mean(losses))))

    out = DynamicsEnsemble(
        members=new_members,
        normalizer=norm,
        state_dim=ensemble.state_dim,
        action_dim=ensemble.action_dim,
        mode=ensemble.mode,
        min_logvar=min_lv,
        max_logvar=max_lv,
        loss_history=history,
    )
    return out


def _mse_step(member: FlatParams, zb: np.ndarray, tb: np.ndarray):
    out = net.forward(member, zb)
    err = out - tb
    loss = float(np.mean(err**2))
    grad_out = 2.0 * err / err.size
    return loss, net.backward(member, zb, grad_out)


def _nll_step(member, zb, tb, min_lv, max_lv):
    """Gaussian NLL with soft-clamped log-variance; returns the loss, the
    member gradient, and gradients for the clamp bounds."""
    out = net.forward(member, zb)
    d = tb.shape[1]
    mean, raw = out[:, :d], out[:, d:]
    u = max_lv - raw
    s_u = _sigmoid(u)
    lv1 = max_lv - _softplus(u)
    w = lv1 - min_lv
    s_w = _sigmoid(w)
    lv = min_lv + _softplus(w)
    inv_var = np.exp(-lv)
    err = mean - tb
    n = zb.shape[0]
    loss = float(np.mean(np.sum(0.5 * (err**2 * inv_var + lv), axis=1)))
    loss += LOGVAR_BOUND_PENALTY * float(np.sum(max_lv) - np.sum(min_lv))

    dmean = err * inv_var / n
    dlv = 0.5 * (1.0 - err**2 * inv_var) / n
    draw = dlv * s_w * s_u
    grad_out = np.concatenate([dmean, draw], axis=1)
    grad = net.backward(member, zb, grad_out)
    gmax = np.sum(dlv * s_w * (1.0 - s_u), axis=0) + LOGVAR_BOUND_PENALTY
    gmin = np.sum(dlv * (1.0 - s_w), axis=0) - LOGVAR_BOUND_PENALTY
    return loss, grad, gmin, gmax


def normalized_mse(ensemble: DynamicsEnsemble, states, actions, next_states) -> float:
    """Held-out one-step error in normalized delta units (ensemble mean)."""
    states = np.asarray(states, dtype=np.float64)
    pred = predict(ensemble, states, np.asarray(actions, dtype=np.float64))
    err = (pred - np.asarray(next_states, dtype=np.float64)) / ensemble.normalizer.out_std
    return float(np.mean(err**2))


def save_ensemble(directory: str | Path, ensemble: DynamicsEnsemble) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, member in enumerate(ensemble.members):
        net.save_params(directory / f"member_{i:02d}.bin", member)
    norm = ensemble.normalizer
    blob = np.concatenate([norm.in_mean, norm.in_std, norm.out_mean, norm.out_std])
    np.save(directory / "normalizer.npy", blob)
    meta = [
        f"mode = {ensemble.mode}",
        f"members = {len(ensemble.members)}",
        f"state_dim = {ensemble.state_dim}",
        f"action_dim = {ensemble.action_dim}",
    ]
    (directory / "ensemble.txt").write_text("\n".join(meta) + "\n")
    if ensemble.mode == "probabilistic":
        np.save(
            directory / "logvar_bounds.npy",
            np.stack([ensemble.min_logvar, ensemble.max_logvar]),
        )


def load_ensemble(directory: str | Path) -> DynamicsEnsemble:
    directory = Path(directory)
    meta_path = directory / "ensemble.txt"
    if not meta_path.exists():
        raise ConfigError(f"no ensemble checkpoint in {directory}")
    meta = dict(
        line.split(" = ", 1) for line in meta_path.read_text().splitlines() if line
    )
    n_members = int(meta["members"])
    state_dim, action_dim = int(meta["state_dim"]), int(meta["action_dim"])
    members = [
        net.load_params(directory / f"member_{i:02d}.bin", activation="swish")
        for i in range(n_members)
    ]
    blob = np.load(directory / "normalizer.npy")
    in_dim = state_dim + action_dim
    norm = Normalizer(
        blob[:in_dim],
        blob[in_dim : 2 * in_dim],
        blob[2 * in_dim : 2 * in_dim + state_dim],
        blob[2 * in_dim + state_dim :],
    )
    ens = DynamicsEnsemble(
        members=members,
        normalizer=norm,
        state_dim=state_dim,
        action_dim=action_dim,
        mode=meta["mode"],
    )
    if ens.mode == "probabilistic":
        bounds = np.load(directory / "logvar_bounds.npy")
        ens.min_logvar, ens.max_logvar = bounds[0], bounds[1]
    return ens
