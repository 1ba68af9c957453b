"""CEM search core and the planner variants.

Variants: random shooting (RS), CEM over action sequences (PETS), CEM
over action-sequence noise around a policy proposal (POPLIN-A, init and
replan schemes), and CEM over policy-parameter noise (POPLIN-P, uniform
or per-timestep noise).

Candidate k of iteration j reads its noise from row k of a block keyed
by (seed, j), so results are identical whether candidates are scored
serially or in parallel chunks (POPLIN_THREADS), and the first K rows
agree across different population sizes.

Elite selection is rank-based with ties broken by candidate index. The
distribution update keeps `smoothing` of the previous mean/variance and
moves the rest of the way to the elite fit; variances are floored after
every update.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import net
from .errors import ConfigError, PlannerError
from .net import FlatParams

POPLIN_THREADS_VAR = "POPLIN_THREADS"


@dataclass(frozen=True)
class CemConfig:
    population: int = 400
    elites: int = 40
    iterations: int = 5
    smoothing: float = 0.1  # fraction of the previous distribution retained
    init_sigma: float = 0.1
    horizon: int = 30
    variance_floor: float = 0.0
    warm_start: bool = True
    include_mean: bool = False  # force the current mean in as candidate 0
    execute_best: bool = False  # execute the best-ever candidate, not the mean
    record_candidates: bool = False

    def __post_init__(self):
        if self.population < 1:
            raise ConfigError("cem.population must be >= 1")
        if not 1 <= self.elites <= self.population:
            raise ConfigError("cem.elites must satisfy 1 <= elites <= population")
        if self.iterations < 1:
            raise ConfigError("cem.iterations must be >= 1")
        if self.horizon < 1:
            raise ConfigError("cem.horizon must be >= 1")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ConfigError("cem.smoothing must be in [0, 1]")
        if self.init_sigma < 0:
            raise ConfigError("cem.init_sigma must be >= 0")
        if self.variance_floor < 0:
            raise ConfigError("cem.variance_floor must be >= 0")


@dataclass
class GaussianSearchDist:
    mean: np.ndarray
    diag_var: np.ndarray


@dataclass
class IterationTrace:
    returns: np.ndarray
    elite_indices: np.ndarray
    mean: np.ndarray
    diag_var: np.ndarray
    candidates: np.ndarray | None = None


@dataclass
class CemResult:
    best_candidate: np.ndarray
    best_return: float
    final_dist: GaussianSearchDist
    initial_mean: np.ndarray
    trace: list[IterationTrace] = field(default_factory=list)


@dataclass
class PlanOutcome:
    chosen_action: np.ndarray
    best_candidate_return: float
    final_dist: GaussianSearchDist
    initial_mean: np.ndarray
    solution: np.ndarray  # candidate-space vector the chosen action came from
    imagined_states: np.ndarray | None = None
    imagined_actions: np.ndarray | None = None
    param_noise: np.ndarray | None = None  # executed omega (POPLIN-P only)
    candidates_per_iteration: list[np.ndarray] | None = None
    returns_per_iteration: list[np.ndarray] | None = None
    elite_indices_per_iteration: list[np.ndarray] | None = None


def _n_threads() -> int:
    return max(1, int(os.environ.get(POPLIN_THREADS_VAR, "1")))


def _score(objective, candidates: np.ndarray) -> np.ndarray:
    n = _n_threads()
    k = candidates.shape[0]
    if n == 1 or k < 2 * n:
        return np.asarray(objective(candidates), dtype=np.float64)
    chunks = np.array_split(candidates, n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(objective, chunks))
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def _sample(seed: int, iteration: int, population: int, dim: int) -> np.ndarray:
    """Candidate noise block for one iteration.

    Candidate k's noise is row k of a stream keyed by (seed, iteration),
    so it is independent of the population size (row prefixes of a larger
    population match a smaller one exactly) and of how scoring is later
    chunked across threads.
    """
    rng = np.random.default_rng((seed, iteration))
    return rng.standard_normal((population, dim))


def cem_optimize(
    objective,
    dim: int,
    cfg: CemConfig,
    seed: int,
    init_mean: np.ndarray | None = None,
) -> CemResult:
    """Iterated elite refitting of a diagonal Gaussian.

    `objective` maps a (K, dim) candidate matrix to (K,) returns and may
    emit -inf for disqualified candidates. Returns the best candidate
    ever scored alongside the final distribution.
    """
    mean = np.zeros(dim) if init_mean is None else np.array(init_mean, dtype=np.float64)
    init0 = mean.copy()
    var = np.full(dim, cfg.init_sigma**2)
    var = np.maximum(var, cfg.variance_floor)

    best_candidate = mean.copy()
    best_return = -np.inf
    any_finite_ever = False
    trace: list[IterationTrace] = []

    for j in range(cfg.iterations):
        z = _sample(seed, j, cfg.population, dim)
        candidates = mean + np.sqrt(var) * z
        if cfg.include_mean:
            candidates[0] = mean
        returns = _score(objective, candidates)

        finite = np.isfinite(returns)
        if not np.any(finite):
            trace.append(IterationTrace(returns, np.empty(0, dtype=int), mean.copy(), var.copy(),
                                        candidates.copy() if cfg.record_candidates else None))
            continue
        any_finite_ever = True

        order = np.argsort(-returns, kind="stable")
        elite_idx = order[: cfg.elites]
        elites = candidates[elite_idx]
        if returns[elite_idx[0]] > best_return:
            best_return = float(returns[elite_idx[0]])
            best_candidate = candidates[elite_idx[0]].copy()

        mean = cfg.smoothing * mean + (1 - cfg.smoothing) * elites.mean(axis=0)
        var = cfg.smoothing * var + (1 - cfg.smoothing) * elites.var(axis=0)
        var = np.maximum(var, cfg.variance_floor)
        trace.append(
            IterationTrace(
                returns,
                elite_idx.copy(),
                mean.copy(),
                var.copy(),
                candidates.copy() if cfg.record_candidates else None,
            )
        )

    if not any_finite_ever:
        raise PlannerError("every candidate diverged in every CEM iteration")
    return CemResult(best_candidate, best_return, GaussianSearchDist(mean, var), init0, trace)


def _midpoint(env_spec) -> np.ndarray:
    return 0.5 * (env_spec.action_low + env_spec.action_high)


def _clip(actions, env_spec):
    return np.clip(actions, env_spec.action_low, env_spec.action_high)


def _shift_solution(prev: np.ndarray, block: int, fill: np.ndarray) -> np.ndarray:
    out = np.concatenate([prev[block:], fill])
    return out


def _outcome_from_result(result: CemResult, cfg: CemConfig) -> dict:
    extra = {}
    if cfg.record_candidates:
        extra["candidates_per_iteration"] = [t.candidates for t in result.trace]
        extra["returns_per_iteration"] = [t.returns for t in result.trace]
        extra["elite_indices_per_iteration"] = [t.elite_indices for t in result.trace]
    return extra


def plan_rs(state, model, reward_fn, env_spec, cfg: CemConfig, seed: int) -> PlanOutcome:
    """Random shooting: uniform candidate sequences, execute the best."""
    tau, adim = cfg.horizon, env_spec.action_dim
    dim = tau * adim
    span = env_spec.action_high - env_spec.action_low
    rng = np.random.default_rng((seed, 0))
    cands = np.tile(env_spec.action_low, tau) + rng.random(
        (cfg.population, dim)
    ) * np.tile(span, tau)

    def objective(c):
        seqs = c.reshape(-1, tau, adim)
        return dyn.batch_expected_returns(
            model, reward_fn, state, lambda t, s: seqs[:, t], tau, c.shape[0]
        )

    returns = _score(objective, cands)
    if not np.any(np.isfinite(returns)):
        raise PlannerError("every random-shooting candidate diverged")
    best = int(np.argmax(np.where(np.isfinite(returns), returns, -np.inf)))
    solution = cands[best]
    chosen = _clip(solution[:adim], env_spec)
    states, actions, _ = dyn.rollout_plan(
        model, reward_fn, state, lambda t, s: solution[t * adim : (t + 1) * adim], tau
    )
    return PlanOutcome(
        chosen_action=chosen,
        best_candidate_return=float(returns[best]),
        final_dist=GaussianSearchDist(solution.copy(), np.zeros(dim)),
        initial_mean=np.zeros(dim),
        solution=solution,
        imagined_states=states,
        imagined_actions=actions,
    )


def plan_pets(
    state,
    model,
    reward_fn,
    env_spec,
    cfg: CemConfig,
    seed: int,
    prev_solution: np.ndarray | None = None,
) -> PlanOutcome:
    """CEM over full action sequences, warm-started from the previous
    solution shifted one step (the vacated tail is midpoint-filled)."""
    tau, adim = cfg.horizon, env_spec.action_dim
    dim = tau * adim
    if cfg.warm_start and prev_solution is not None:
        init_mean = _shift_solution(prev_solution, adim, _midpoint(env_spec))
    else:
        init_mean = np.tile(_midpoint(env_spec), tau)

    def objective(c):
        seqs = _clip(c.reshape(-1, tau, adim), env_spec)
        return dyn.batch_expected_returns(
            model, reward_fn, state, lambda t, s: seqs[:, t], tau, c.shape[0]
        )

    result = cem_optimize(objective, dim, cfg, seed, init_mean)
    solution = result.best_candidate if cfg.execute_best else result.final_dist.mean
    chosen = _clip(solution[:adim], env_spec)
    seq = _clip(solution.reshape(tau, adim), env_spec)
    states, actions, _ = dyn.rollout_plan(model, reward_fn, state, lambda t, s: seq[t], tau)
    return PlanOutcome(
        chosen_action=chosen,
        best_candidate_return=result.best_return,
        final_dist=result.final_dist,
        initial_mean=result.initial_mean,
        solution=np.array(solution),
        imagined_states=states,
        imagined_actions=actions,
        **_outcome_from_result(result, cfg),
    )


def _policy_reference(policy, bounds, model, reward_fn, state, tau, env_spec):
    """Reference action sequence: roll the unperturbed policy through the
    model (each action fed back into the imagined trajectory)."""
    states, actions, _ = dyn.rollout_plan(
        model, reward_fn, state, lambda t, s: net.forward(policy, s, bounds), tau
    )
    if actions.shape[0] < tau:  # diverged reference; pad with midpoint
        pad = np.tile(_midpoint(env_spec), (tau - actions.shape[0], 1))
        actions = np.concatenate([actions.reshape(-1, env_spec.action_dim), pad])
    return actions


def plan_poplin_a(
    state,
    policy: FlatParams,
    model,
    reward_fn,
    env_spec,
    cfg: CemConfig,
    mode: str,
    seed: int,
    prev_solution: np.ndarray | None = None,
) -> PlanOutcome:
    """CEM over additive action noise around the policy's proposal.

    mode="init": noise is added to a fixed reference sequence proposed by
    the policy once per planning call. mode="replan": the policy is
    re-queried along every candidate's own imagined trajectory.
    """
    if mode not in ("init", "replan"):
        raise ConfigError(f"poplin-a mode must be init or replan, got {mode!r}")
    tau, adim = cfg.horizon, env_spec.action_dim
    dim = tau * adim
    bounds = (env_spec.action_low, env_spec.action_high)

    reference = None
    if mode == "init":
        reference = _policy_reference(policy, bounds, model, reward_fn, state, tau, env_spec)

        def objective(c):
            deltas = c.reshape(-1, tau, adim)
            return dyn.batch_expected_returns(
                model,
                reward_fn,
                state,
                lambda t, s: _clip(reference[t] + deltas[:, t], env_spec),
                tau,
                c.shape[0],
            )

    else:

        def objective(c):
            deltas = c.reshape(-1, tau, adim)
            return dyn.batch_expected_returns(
                model,
                reward_fn,
                state,
                lambda t, s: _clip(net.forward(policy, s, bounds) + deltas[:, t], env_spec),
                tau,
                c.shape[0],
            )

    if cfg.warm_start and prev_solution is not None:
        init_mean = _shift_solution(prev_solution, adim, np.zeros(adim))
    else:
        init_mean = np.zeros(dim)

    result = cem_optimize(objective, dim, cfg, seed, init_mean)
    solution = result.best_candidate if cfg.execute_best else result.final_dist.mean
    delta_seq = solution.reshape(tau, adim)
    if mode == "init":
        chosen = _clip(reference[0] + delta_seq[0], env_spec)
        provider = lambda t, s: _clip(reference[t] + delta_seq[t], env_spec)
    else:
        chosen = _clip(net.forward(policy, state, bounds) + delta_seq[0], env_spec)
        provider = lambda t, s: _clip(net.forward(policy, s, bounds) + delta_seq[t], env_spec)
    states, actions, _ = dyn.rollout_plan(model, reward_fn, state, provider, tau)
    return PlanOutcome(
        chosen_action=chosen,
        best_candidate_return=result.best_return,
        final_dist=result.final_dist,
        initial_mean=result.initial_mean,
        solution=np.array(solution),
        imagined_states=states,
        imagined_actions=actions,
        **_outcome_from_result(result, cfg),
    )


VARIANTS = (
    "rs",
    "pets",
    "poplin-a-init",
    "poplin-a-replan",
    "poplin-p-uni",
    "poplin-p-sep",
)


def plan(
    variant: str,
    state,
    policy,
    model,
    reward_fn,
    env_spec,
    cfg: CemConfig,
    seed: int,
    prev_solution: np.ndarray | None = None,
) -> PlanOutcome:
    """Dispatch one planning step to the configured variant."""
    if variant == "rs":
        return plan_rs(state, model, reward_fn, env_spec, cfg, seed)
    if variant == "pets":
        return plan_pets(state, model, reward_fn, env_spec, cfg, seed, prev_solution)
    if variant in ("poplin-a-init", "poplin-a-replan"):
        if policy is None:
            raise ConfigError(f"{variant} requires a policy")
        return plan_poplin_a(
            state, policy, model, reward_fn, env_spec, cfg,
            variant.rsplit("-", 1)[1], seed, prev_solution,
        )
    if variant in ("poplin-p-uni", "poplin-p-sep"):
        if policy is None:
            raise ConfigError(f"{variant} requires a policy")
        return plan_poplin_p(
            state, policy, model, reward_fn, env_spec, cfg,
            variant.rsplit("-", 1)[1], seed, prev_solution,
        )
    raise ConfigError(f"unknown planner variant {variant!r}; expected one of {VARIANTS}")


def plan_poplin_p(
    state,
    policy: FlatParams,
    model,
    reward_fn,
    env_spec,
    cfg: CemConfig,
    noise_mode: str,
    seed: int,
    prev_solution: np.ndarray | None = None,
) -> PlanOutcome:
    """CEM over policy-parameter noise.

    noise_mode="uni" shares one noise vector across the horizon (search
    dimension P); "sep" gives each timestep its own slice (tau * P).
    Actions come out of the squashed policy, so no clipping is needed.
    """
    if noise_mode not in ("uni", "sep"):
        raise ConfigError(f"poplin-p noise mode must be uni or sep, got {noise_mode!r}")
    tau = cfg.horizon
    p = net.param_count(policy.shape)
    dim = p if noise_mode == "uni" else tau * p
    bounds = (env_spec.action_low, env_spec.action_high)
    theta = policy.values

    def objective(c):
        def provider(t, s):
            omega_t = c if noise_mode == "uni" else c[:, t * p : (t + 1) * p]
            return net.forward_population(policy.shape, theta + omega_t, s, bounds)

        return dyn.batch_expected_returns(model, reward_fn, state, provider, tau, c.shape[0])

    if cfg.warm_start and prev_solution is not None:
        if noise_mode == "uni":
            init_mean = np.array(prev_solution, dtype=np.float64)
        else:
            init_mean = _shift_solution(prev_solution, p, np.zeros(p))
    else:
        init_mean = np.zeros(dim)

    result = cem_optimize(objective, dim, cfg, seed, init_mean)
    solution = result.best_candidate if cfg.execute_best else result.final_dist.mean
    omega0 = solution if noise_mode == "uni" else solution[:p]
    chosen = net.forward(FlatParams(theta + omega0, policy.shape), state, bounds)

    def provider(t, s):
        omega_t = solution if noise_mode == "uni" else solution[t * p : (t + 1) * p]
        return net.forward(FlatParams(theta + omega_t, policy.shape), s, bounds)

    states, actions, _ = dyn.rollout_plan(model, reward_fn, state, provider, tau)
    return PlanOutcome(
        chosen_action=chosen,
        best_candidate_return=result.best_return,
        final_dist=result.final_dist,
        initial_mean=result.initial_mean,
        solution=np.array(solution),
        imagined_states=states,
        imagined_actions=actions,
        param_noise=np.array(omega0),
        **_outcome_from_result(result, cfg),
    )
