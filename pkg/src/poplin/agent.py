"""Outer training loop: interleaved data collection under MPC, dynamics
updates, and policy distillation, plus the two evaluation protocols
(full planning at every step vs. executing the policy directly)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill as dst
from . import dynamics as dyn
from . import net, planner
from .dynamics import DynamicsEnsemble, TransitionDataset
from .envs import Env, make_env
from .errors import AgentError, ConfigError, UsageError
from .net import FlatParams, MlpShape
from .planner import CemConfig, PlanOutcome
from .util import derive_seed, fmt_float, write_csv

# seed-derivation channels
_CH_RANDOM, _CH_RESET, _CH_PLAN, _CH_DYN, _CH_DISTILL, _CH_EVAL = range(6)


@dataclass(frozen=True)
class AgentConfig:
    planner_variant: str = "pets"
    cem: CemConfig = field(default_factory=CemConfig)
    distill: dst.DistillConfig = field(default_factory=dst.DistillConfig)
    policy_hidden: tuple[int, ...] = (32,)
    policy_zero_init: bool = True
    disc_hidden: tuple[int, ...] = (32,)
    gan_entropy_penalty: float = 0.001
    dynamics_members: int = 5
    dynamics_hidden: tuple[int, ...] = (64, 64)
    dynamics_mode: str = "probabilistic"
    dynamics_epochs: int = 25
    dynamics_batch: int = 64
    dynamics_learning_rate: float = 1e-3
    dynamics_from_scratch: bool = False
    episodes_per_iteration: int = 1
    total_timesteps: int = 4000
    initial_random_timesteps: int = 200
    eval_episodes: int = 0
    stop_return: float | None = None
    seed: int = 0

    def validate(self, env: Env) -> None:
        if self.planner_variant not in planner.VARIANTS:
            raise ConfigError(
                f"unknown planner variant {self.planner_variant!r}; "
                f"expected one of {planner.VARIANTS}"
            )
        if self.initial_random_timesteps < env.spec.horizon:
            raise ConfigError(
                "initial_random_timesteps must cover at least one episode"
            )
        if self.total_timesteps < self.initial_random_timesteps:
            raise ConfigError("total_timesteps must be >= initial_random_timesteps")
        if self.distill.scheme == "gan" and not self.planner_variant.startswith(
            "poplin-p"
        ):
            raise ConfigError("distill.scheme gan is only valid with POPLIN-P planners")


@dataclass
class EpisodeRow:
    timestep: int
    episode: int
    mpc_return: float
    policy_return: float | None = None
    dyn_loss: float | None = None
    distill_loss: float | None = None


@dataclass
class RunRecord:
    episodes: list[EpisodeRow] = field(default_factory=list)
    dynamics_losses: list[tuple[int, int, float]] = field(default_factory=list)
    distill_losses: list[tuple[int, str, float, float | None]] = field(default_factory=list)
    wall_clock: float = 0.0

    def csv_rows(self):
        for row in self.episodes:
            yield (
                row.timestep,
                row.episode,
                fmt_float(row.mpc_return),
                "" if row.policy_return is None else fmt_float(row.policy_return),
                "" if row.dyn_loss is None else fmt_float(row.dyn_loss),
                "" if row.distill_loss is None else fmt_float(row.distill_loss),
            )


RUN_CSV_HEADER = ["timestep", "episode", "mpc_return", "policy_return", "dyn_loss", "distill_loss"]


def make_policy(env: Env, hidden: tuple[int, ...], zero_init: bool, seed: int) -> FlatParams:
    shape = MlpShape((env.spec.state_dim,) + tuple(hidden) + (env.spec.action_dim,))
    return net.zero_params(shape) if zero_init else net.init_params(shape, seed)


def _policy_bounds(env: Env):
    return (env.spec.action_low, env.spec.action_high)


def _random_phase(env: Env, data: TransitionDataset, cfg: AgentConfig, record: RunRecord):
    steps = 0
    episode = 0
    while steps < cfg.initial_random_timesteps:
        rng = np.random.default_rng(derive_seed(cfg.seed, _CH_RANDOM, episode))
        state = env.reset(derive_seed(cfg.seed, _CH_RESET, episode))
        ep_return = 0.0
        while not state.done and steps < cfg.initial_random_timesteps:
            span = env.spec.action_high - env.spec.action_low
            action = env.spec.action_low + rng.random(env.spec.action_dim) * span
            nxt, reward = env.step(state, action)
            data.add(state.observation, action, nxt.observation, reward, planned=False)
            ep_return += reward
            state = nxt
            steps += 1
        record.episodes.append(EpisodeRow(steps, episode, ep_return))
        episode += 1
    return steps, episode


def _planned_episode(
    env: Env,
    data: TransitionDataset,
    policy: FlatParams,
    ensemble: DynamicsEnsemble,
    cfg: AgentConfig,
    episode_index: int,
    step_offset: int,
    dump_dir: Path | None,
) -> float:
    state = env.reset(derive_seed(cfg.seed, _CH_RESET, episode_index))
    prev_solution = None
    ep_return = 0.0
    record_noise = cfg.distill.scheme == "avg" and cfg.planner_variant.startswith("poplin-p")
    hallucinate = cfg.distill.data_source == "hallucination"
    step = step_offset
    while not state.done:
        outcome = planner.plan(
            cfg.planner_variant,
            state.observation,
            policy,
            ensemble,
            env.reward,
            env.spec,
            cfg.cem,
            derive_seed(cfg.seed, _CH_PLAN, step),
            prev_solution,
        )
        _check_outcome(outcome, step)
        prev_solution = outcome.solution
        if record_noise and outcome.param_noise is not None:
            data.add_noise_record(state.observation, outcome.param_noise)
        if hallucinate and outcome.imagined_actions is not None:
            for t in range(len(outcome.imagined_actions)):
                data.add_hallucinated(outcome.imagined_states[t], outcome.imagined_actions[t])
        if dump_dir is not None:
            _dump_step(dump_dir, step, state.observation, outcome)
        nxt, reward = env.step(state, outcome.chosen_action)
        data.add(state.observation, outcome.chosen_action, nxt.observation, reward, planned=True)
        ep_return += reward
        state = nxt
        step += 1
    return ep_return


def _check_outcome(outcome: PlanOutcome, step: int):
    if not np.all(np.isfinite(outcome.chosen_action)) or not np.isfinite(
        outcome.best_candidate_return
    ):
        raise AgentError(
            f"non-finite plan at step {step}: action={outcome.chosen_action}, "
            f"best_return={outcome.best_candidate_return}, "
            f"final_mean_max={np.max(np.abs(outcome.final_dist.mean))}"
        )


def _dump_step(dump_dir: Path, step: int, observation, outcome: PlanOutcome):
    dump_dir.mkdir(parents=True, exist_ok=True)
    states_path = dump_dir / "states.csv"
    if not states_path.exists():
        states_path.write_text("step," + ",".join(
            f"s{i}" for i in range(len(observation))) + "\n")
    with open(states_path, "a") as fh:
        fh.write(f"{step}," + ",".join(fmt_float(v) for v in observation) + "\n")
    if outcome.candidates_per_iteration is not None:
        stacked = np.stack(outcome.candidates_per_iteration)
        np.save(dump_dir / f"candidates_{step:06d}.npy", stacked)
        rows = []
        for j, rets in enumerate(outcome.returns_per_iteration):
            for k, r in enumerate(rets):
                rows.append((j, k, float(r)))
        write_csv(dump_dir / f"returns_{step:06d}.csv", ["iteration", "candidate", "return"], rows)


def run_training(
    cfg: AgentConfig,
    env_id: str,
    output_dir: str | Path | None = None,
    dump_candidates: bool = False,
) -> RunRecord:
    """Phase 1 collects uniform-random transitions; afterwards each
    iteration retrains the dynamics ensemble on everything seen, collects
    episodes under the configured planner (executing only the first
    action of each plan), and distills the planned behavior into the
    policy. Fully deterministic for a fixed config and seed."""
    env = make_env(env_id)
    cfg.validate(env)
    t_start = time.perf_counter()
    out_path = Path(output_dir) if output_dir is not None else None
    dump_dir = (out_path / "dumps") if (out_path is not None and dump_candidates) else None

    data = TransitionDataset(env.spec.state_dim, env.spec.action_dim)
    record = RunRecord()
    policy = make_policy(env, cfg.policy_hidden, cfg.policy_zero_init, derive_seed(cfg.seed, 7))
    disc = dst.make_discriminator(
        env.spec.state_dim,
        env.spec.action_dim,
        cfg.disc_hidden,
        derive_seed(cfg.seed, 8),
        cfg.gan_entropy_penalty,
    )
    ensemble = make_agent_ensemble(env, cfg, seed=derive_seed(cfg.seed, 9))

    steps, episode = _random_phase(env, data, cfg, record)

    iteration = 0
    while steps + env.spec.horizon * cfg.episodes_per_iteration <= cfg.total_timesteps:
        if cfg.dynamics_from_scratch:
            ensemble = make_agent_ensemble(env, cfg, seed=derive_seed(cfg.seed, 9))
        ensemble = dyn.train_dynamics(
            ensemble,
            data,
            cfg.dynamics_epochs,
            cfg.dynamics_batch,
            derive_seed(cfg.seed, _CH_DYN, iteration),
            cfg.dynamics_learning_rate,
        )
        record.dynamics_losses = list(ensemble.loss_history)
        dyn_loss = _final_epoch_loss(ensemble)

        iter_returns = []
        for _ in range(cfg.episodes_per_iteration):
            ep_return = _planned_episode(
                env, data, policy, ensemble, cfg, episode, steps, dump_dir
            )
            steps += env.spec.horizon
            iter_returns.append(ep_return)
            record.episodes.append(
                EpisodeRow(steps, episode, ep_return, dyn_loss=dyn_loss)
            )
            episode += 1

        policy, disc, distill_loss = _distill(policy, disc, data, cfg, env, iteration, record)
        record.episodes[-1].distill_loss = distill_loss

        if cfg.eval_episodes > 0:
            mean_ret, _, _ = evaluate_policy_control(
                policy, env_id, cfg.eval_episodes, derive_seed(cfg.seed, _CH_EVAL, iteration)
            )
            record.episodes[-1].policy_return = mean_ret

        iteration += 1
        if cfg.stop_return is not None and np.mean(iter_returns) >= cfg.stop_return:
            break

    record.wall_clock = time.perf_counter() - t_start
    if out_path is not None:
        _write_outputs(out_path, record, policy, disc, ensemble, cfg)
    return record


def make_agent_ensemble(env: Env, cfg: AgentConfig, seed: int) -> DynamicsEnsemble:
    return dyn.make_ensemble(
        env.spec.state_dim,
        env.spec.action_dim,
        cfg.dynamics_members,
        cfg.dynamics_hidden,
        cfg.dynamics_mode,
        seed,
    )


def _final_epoch_loss(ensemble: DynamicsEnsemble) -> float | None:
    if not ensemble.loss_history:
        return None
    last_epoch = max(e for e, _, _ in ensemble.loss_history)
    vals = [ls for e, _, ls in ensemble.loss_history if e == last_epoch]
    return float(np.mean(vals))


def _distill(policy, disc, data, cfg: AgentConfig, env: Env, iteration: int, record: RunRecord):
    scheme = cfg.distill.scheme
    bounds = _policy_bounds(env)
    seed = derive_seed(cfg.seed, _CH_DISTILL, iteration)
    if scheme == "none":
        return policy, disc, None
    if scheme == "bc":
        policy, losses = dst.distill_bc(policy, data, cfg.distill, seed, bounds)
        record.distill_losses.append((iteration, "bc", losses[-1], None))
        return policy, disc, losses[-1]
    if scheme == "gan":
        policy, disc, losses = dst.distill_gan(policy, disc, data, cfg.distill, seed, bounds)
        gen_loss, disc_loss = losses[-1]
        record.distill_losses.append((iteration, "gan", gen_loss, disc_loss))
        return policy, disc, gen_loss
    if scheme == "avg":
        before = policy.values
        policy = dst.distill_avg(policy, data)
        shift = float(np.max(np.abs(policy.values - before))) if len(before) else 0.0
        record.distill_losses.append((iteration, "avg", shift, None))
        return policy, disc, shift
    raise ConfigError(f"unknown distill scheme {scheme!r}")


def _write_outputs(out_path: Path, record: RunRecord, policy, disc, ensemble, cfg: AgentConfig):
    out_path.mkdir(parents=True, exist_ok=True)
    write_csv(out_path / "run.csv", RUN_CSV_HEADER, record.csv_rows())
    write_csv(
        out_path / "dynamics_losses.csv",
        ["epoch", "member", "loss"],
        record.dynamics_losses,
    )
    write_csv(
        out_path / "distill_losses.csv",
        ["iteration", "scheme", "loss", "disc_loss"],
        [
            (i, s, fmt_float(l), "" if d is None else fmt_float(d))
            for i, s, l, d in record.distill_losses
        ],
    )
    net.save_params(out_path / "policy.bin", policy)
    net.save_params(out_path / "discriminator.bin", disc.params)
    dyn.save_ensemble(out_path / "dynamics", ensemble)


def evaluate_mpc(
    policy: FlatParams | None,
    ensemble,
    env_id: str,
    variant: str,
    cem_cfg: CemConfig,
    episodes: int,
    seed: int,
) -> tuple[float, float, list[float]]:
    """Full planning at every step, no learning; returns (mean, std, returns)."""
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    env = make_env(env_id)
    returns = []
    for ep in range(episodes):
        state = env.reset(derive_seed(seed, _CH_RESET, ep))
        prev_solution = None
        total = 0.0
        step = 0
        while not state.done:
            outcome = planner.plan(
                variant,
                state.observation,
                policy,
                ensemble,
                env.reward,
                env.spec,
                cem_cfg,
                derive_seed(seed, _CH_PLAN, ep, step),
                prev_solution,
            )
            prev_solution = outcome.solution
            state, reward = env.step(state, outcome.chosen_action)
            total += reward
            step += 1
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns)), returns


def evaluate_policy_control(
    policy: FlatParams, env_id: str, episodes: int, seed: int
) -> tuple[float, float, list[float]]:
    """Closed-loop rollout executing the policy directly (no planning)."""
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    env = make_env(env_id)
    bounds = _policy_bounds(env)
    returns = []
    for ep in range(episodes):
        state = env.reset(derive_seed(seed, _CH_RESET, ep))
        total = 0.0
        while not state.done:
            action = net.forward(policy, state.observation, bounds)
            state, reward = env.step(state, action)
            total += reward
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns)), returns
