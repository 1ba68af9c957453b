"""Command-line entry point: train, eval, surface, pca.

Runs are configured by flat key-value text files with dotted keys
(`cem.population = 400`). Every key is validated against the schema
below; unknown keys are rejected by name. The resolved configuration is
echoed into the output directory, and a run is fully reconstructible
from that echo.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, dynamics, net
from .agent import (
    AgentConfig,
    evaluate_mpc,
    evaluate_policy_control,
    run_training,
)
from .distill import DistillConfig
from .envs import make_env
from .errors import ConfigError, PlannerError, UsageError
from .planner import VARIANTS, CemConfig
from .util import fmt_float, write_csv


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _parse_opt_float(text: str):
    return None if not text.strip() else float(text)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return fmt_float(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (parser, default). Defaults mirror the config dataclasses.
_DC = AgentConfig()
SCHEMA: dict[str, tuple] = {
    "env.id": (str, "pendulum"),
    "output.dir": (str, ""),
    "dump.candidates": (_parse_bool, False),
    "planner.variant": (str, _DC.planner_variant),
    "cem.population": (int, _DC.cem.population),
    "cem.elites": (int, _DC.cem.elites),
    "cem.iterations": (int, _DC.cem.iterations),
    "cem.smoothing": (float, _DC.cem.smoothing),
    "cem.init_sigma": (float, _DC.cem.init_sigma),
    "cem.horizon": (int, _DC.cem.horizon),
    "cem.variance_floor": (float, _DC.cem.variance_floor),
    "cem.warm_start": (_parse_bool, _DC.cem.warm_start),
    "cem.include_mean": (_parse_bool, _DC.cem.include_mean),
    "cem.execute_best": (_parse_bool, _DC.cem.execute_best),
    "policy.hidden": (_parse_ints, _DC.policy_hidden),
    "policy.zero_init": (_parse_bool, _DC.policy_zero_init),
    "disc.hidden": (_parse_ints, _DC.disc_hidden),
    "distill.scheme": (str, _DC.distill.scheme),
    "distill.epochs": (int, _DC.distill.epochs),
    "distill.batch": (int, _DC.distill.batch),
    "distill.bc_learning_rate": (float, _DC.distill.bc_learning_rate),
    "distill.gan_gen_learning_rate": (float, _DC.distill.gan_gen_learning_rate),
    "distill.gan_disc_learning_rate": (float, _DC.distill.gan_disc_learning_rate),
    "distill.gan_noise_sigma": (float, _DC.distill.gan_noise_sigma),
    "distill.gan_entropy_penalty": (float, _DC.gan_entropy_penalty),
    "distill.gan_non_saturating": (_parse_bool, _DC.distill.gan_non_saturating),
    "distill.data_source": (str, _DC.distill.data_source),
    "dynamics.members": (int, _DC.dynamics_members),
    "dynamics.hidden": (_parse_ints, _DC.dynamics_hidden),
    "dynamics.mode": (str, _DC.dynamics_mode),
    "dynamics.epochs": (int, _DC.dynamics_epochs),
    "dynamics.batch": (int, _DC.dynamics_batch),
    "dynamics.learning_rate": (float, _DC.dynamics_learning_rate),
    "dynamics.from_scratch": (_parse_bool, _DC.dynamics_from_scratch),
    "agent.episodes_per_iteration": (int, _DC.episodes_per_iteration),
    "agent.total_timesteps": (int, _DC.total_timesteps),
    "agent.initial_random_timesteps": (int, _DC.initial_random_timesteps),
    "agent.eval_episodes": (int, _DC.eval_episodes),
    "agent.stop_return": (_parse_opt_float, _DC.stop_return),
    "agent.seed": (int, _DC.seed),
}


def parse_config_text(text: str) -> dict:
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return values


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def config_to_agent(values: dict) -> AgentConfig:
    cem = CemConfig(
        population=values["cem.population"],
        elites=values["cem.elites"],
        iterations=values["cem.iterations"],
        smoothing=values["cem.smoothing"],
        init_sigma=values["cem.init_sigma"],
        horizon=values["cem.horizon"],
        variance_floor=values["cem.variance_floor"],
        warm_start=values["cem.warm_start"],
        include_mean=values["cem.include_mean"],
        execute_best=values["cem.execute_best"],
    )
    distill = DistillConfig(
        scheme=values["distill.scheme"],
        epochs=values["distill.epochs"],
        batch=values["distill.batch"],
        bc_learning_rate=values["distill.bc_learning_rate"],
        gan_gen_learning_rate=values["distill.gan_gen_learning_rate"],
        gan_disc_learning_rate=values["distill.gan_disc_learning_rate"],
        gan_noise_sigma=values["distill.gan_noise_sigma"],
        gan_non_saturating=values["distill.gan_non_saturating"],
        data_source=values["distill.data_source"],
    )
    return AgentConfig(
        planner_variant=values["planner.variant"],
        cem=cem,
        distill=distill,
        policy_hidden=values["policy.hidden"],
        policy_zero_init=values["policy.zero_init"],
        disc_hidden=values["disc.hidden"],
        gan_entropy_penalty=values["distill.gan_entropy_penalty"],
        dynamics_members=values["dynamics.members"],
        dynamics_hidden=values["dynamics.hidden"],
        dynamics_mode=values["dynamics.mode"],
        dynamics_epochs=values["dynamics.epochs"],
        dynamics_batch=values["dynamics.batch"],
        dynamics_learning_rate=values["dynamics.learning_rate"],
        dynamics_from_scratch=values["dynamics.from_scratch"],
        episodes_per_iteration=values["agent.episodes_per_iteration"],
        total_timesteps=values["agent.total_timesteps"],
        initial_random_timesteps=values["agent.initial_random_timesteps"],
        eval_episodes=values["agent.eval_episodes"],
        stop_return=values["agent.stop_return"],
        seed=values["agent.seed"],
    )


def echo_config(values: dict, path: Path) -> None:
    lines = [f"{key} = {_fmt(values[key])}" for key in SCHEMA]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    values = load_config(args.config)
    if args.output:
        values["output.dir"] = args.output
    if not values["output.dir"]:
        raise ConfigError("output.dir must be set (config key or --output)")
    cfg = config_to_agent(values)
    make_env(values["env.id"])  # fail fast on a bad env id
    out = Path(values["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(values, out / "config.txt")
    record = run_training(cfg, values["env.id"], out, values["dump.candidates"])
    n = len(record.episodes)
    print(f"wrote {out / 'run.csv'} ({n} episodes, {record.wall_clock:.1f}s)")
    return 0


def _load_run_dir(run_dir: Path):
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise ConfigError(f"no config.txt in {run_dir}")
    values = parse_config_text(cfg_path.read_text())
    policy_path = run_dir / "policy.bin"
    if not policy_path.exists():
        raise ConfigError(f"no policy checkpoint in {run_dir}")
    policy = net.load_params(policy_path)
    return values, policy


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    values, policy = _load_run_dir(run_dir)
    env_id = values["env.id"]
    if args.mode == "policy":
        mean, std, returns = evaluate_policy_control(policy, env_id, args.episodes, args.seed)
    else:
        dyn_dir = run_dir / "dynamics"
        if not (dyn_dir / "ensemble.txt").exists():
            raise ConfigError(f"mpc mode needs a dynamics checkpoint in {dyn_dir}")
        ensemble = dynamics.load_ensemble(dyn_dir)
        cfg = config_to_agent(values)
        mean, std, returns = evaluate_mpc(
            policy, ensemble, env_id, cfg.planner_variant, cfg.cem, args.episodes, args.seed
        )
    print(f"{args.mode} return: {mean:.3f} +/- {std:.3f} over {args.episodes} episodes")
    write_csv(
        run_dir / "eval.csv",
        ["episode", "return"],
        [(i, fmt_float(r)) for i, r in enumerate(returns)],
    )
    return 0


def _dumped_state(run_dir: Path, state_index: int) -> np.ndarray:
    states_path = run_dir / "dumps" / "states.csv"
    if not states_path.exists():
        raise ConfigError(
            f"no candidate dump in {run_dir}; train with dump.candidates = true"
        )
    rows = states_path.read_text().strip().splitlines()[1:]
    if not 0 <= state_index < len(rows):
        raise ConfigError(f"state_index {state_index} out of range (0..{len(rows) - 1})")
    return np.array([float(v) for v in rows[state_index].split(",")[1:]])


def cmd_surface(args) -> int:
    run_dir = Path(args.run_dir)
    values, policy = _load_run_dir(run_dir)
    env = make_env(values["env.id"])
    ensemble = dynamics.load_ensemble(run_dir / "dynamics")
    state = _dumped_state(run_dir, args.state_index)
    cfg = config_to_agent(values)
    if args.space == "action":
        grid, us, vs, _, _ = analysis.action_space_surface(
            env, ensemble, state, cfg.cem, args.seed, args.span, args.resolution
        )
    else:
        grid, us, vs, _, _ = analysis.parameter_space_surface(
            env, ensemble, policy, state, cfg.cem, args.seed, args.span, args.resolution
        )
    out = Path(args.output) if args.output else run_dir / "surface.csv"
    analysis.write_surface_csv(out, grid, us, vs)
    score = analysis.smoothness_score(grid)
    print(f"{args.space}-space smoothness_score: {fmt_float(score)}")
    print(f"wrote {out}")
    return 0


def cmd_pca(args) -> int:
    run_dir = Path(args.run_dir)
    cands_path = run_dir / "dumps" / f"candidates_{args.step:06d}.npy"
    returns_path = run_dir / "dumps" / f"returns_{args.step:06d}.csv"
    if not cands_path.exists():
        raise ConfigError(f"no candidate dump for step {args.step} in {run_dir}")
    stacked = np.load(cands_path)  # (iterations, population, dim)
    rows = returns_path.read_text().strip().splitlines()[1:]
    n_iter, pop, _ = stacked.shape
    returns = np.full((n_iter, pop), -np.inf)
    for line in rows:
        j, k, r = line.split(",")
        returns[int(j), int(k)] = float(r)
    pca = analysis.pca_fit(stacked.reshape(n_iter * pop, -1))
    scatter = analysis.pca_scatter_rows(list(stacked), list(returns), pca)
    out = Path(args.output) if args.output else run_dir / "pca_scatter.csv"
    write_csv(out, ["iteration", "u", "v", "return"], scatter)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poplin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training loop from a config file")
    p_train.add_argument("config", help="path to a flat key-value config file")
    p_train.add_argument("--output", default="", help="override output.dir")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained run directory")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--mode", choices=("mpc", "policy"), required=True)
    p_eval.add_argument("--episodes", type=int, default=3)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(func=cmd_eval)

    p_surface = sub.add_parser("surface", help="reward surface around a dumped state")
    p_surface.add_argument("run_dir")
    p_surface.add_argument("--space", choices=("action", "parameter"), required=True)
    p_surface.add_argument("--state-index", type=int, default=0)
    p_surface.add_argument("--span", type=float, default=1.0)
    p_surface.add_argument("--resolution", type=int, default=21)
    p_surface.add_argument("--seed", type=int, default=0)
    p_surface.add_argument("--output", default="")
    p_surface.set_defaults(func=cmd_surface)

    p_pca = sub.add_parser("pca", help="project dumped candidates to 2D")
    p_pca.add_argument("run_dir")
    p_pca.add_argument("--step", type=int, required=True)
    p_pca.add_argument("--output", default="")
    p_pca.set_defaults(func=cmd_pca)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, PlannerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
