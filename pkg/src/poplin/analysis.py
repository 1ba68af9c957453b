"""Diagnostics: PCA of candidate trajectories and reward-surface grids.

The planner's per-iteration candidate matrices (action sequences, or
flat parameter vectors for parameter-space planners) are projected onto
their top-2 principal components; the surrounding reward surface is the
planning objective evaluated on the PCA plane around a center point.
`smoothness_score` turns the qualitative smooth-vs-jagged comparison
into a number: mean absolute second difference normalized by the grid's
value range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import dynamics as dyn
from . import net, planner
from .errors import UsageError
from .net import FlatParams
from .util import write_csv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (2, D), orthonormal rows
    explained_variance: np.ndarray  # (2,), non-increasing


def pca_fit(rows: np.ndarray) -> PcaModel:
    """Top-2 principal components of the row cloud via SVD.

    Sign convention: the largest-magnitude entry of each component is
    made positive, so refits of equivalent data agree.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise UsageError("pca_fit needs an (N, D) matrix with N >= 2")
    if rows.shape[1] < 2:
        raise UsageError("pca_fit needs at least 2 feature dimensions")
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2].copy()
    for i in range(2):
        j = int(np.argmax(np.abs(components[i])))
        if components[i, j] < 0:
            components[i] = -components[i]
    explained = svals[:2] ** 2 / max(rows.shape[0] - 1, 1)
    return PcaModel(mean, components, explained)


def project(pca: PcaModel, rows: np.ndarray) -> np.ndarray:
    return (np.asarray(rows, dtype=np.float64) - pca.mean) @ pca.components.T


def surface_grid(
    objective,
    pca: PcaModel,
    center: np.ndarray,
    span: float,
    resolution: int,
):
    """Objective values over the PCA plane around `center`.

    objective maps an (N, D) matrix to (N,) returns. Returns (grid, us,
    vs) with grid[i, j] = objective(center + us[i]*c1 + vs[j]*c2).
    """
    if resolution < 1:
        raise UsageError("resolution must be >= 1")
    offsets = np.linspace(-span, span, resolution) if resolution > 1 else np.array([0.0])
    us, vs = offsets, offsets
    points = (
        center[None, None, :]
        + us[:, None, None] * pca.components[0]
        + vs[None, :, None] * pca.components[1]
    ).reshape(resolution * resolution, -1)
    values = np.asarray(objective(points), dtype=np.float64)
    return values.reshape(resolution, resolution), us, vs


def write_surface_csv(path, grid: np.ndarray, us: np.ndarray, vs: np.ndarray) -> None:
    rows = []
    for i, u in enumerate(us):
        for j, v in enumerate(vs):
            rows.append((float(u), float(v), float(grid[i, j])))
    write_csv(path, ["u", "v", "return"], rows)


def smoothness_score(grid: np.ndarray) -> float:
    """Mean absolute second difference across both axes, normalized by
    the finite value range. Constant and linear-ramp grids score 0."""
    grid = np.asarray(grid, dtype=np.float64)
    finite = np.isfinite(grid)
    if not np.any(finite):
        raise UsageError("smoothness_score needs at least one finite cell")
    n_bad = int(grid.size - finite.sum())
    if n_bad:
        log.info("smoothness_score: excluding %d non-finite cells", n_bad)
    vals = grid[finite]
    rng = float(vals.max() - vals.min())
    diffs = []
    for axis in (0, 1):
        g = np.moveaxis(grid, axis, 0)
        m = np.moveaxis(finite, axis, 0)
        if g.shape[0] < 3:
            continue
        second = g[2:] - 2.0 * g[1:-1] + g[:-2]
        ok = m[2:] & m[1:-1] & m[:-2]
        if np.any(ok):
            diffs.append(np.abs(second[ok]))
    if not diffs or rng == 0.0:
        return 0.0
    return float(np.mean(np.concatenate(diffs)) / rng)


def pca_scatter_rows(candidates_per_iteration, returns_per_iteration, pca: PcaModel):
    """(iteration, u, v, return) rows for every candidate of every
    iteration, projected onto the PCA plane."""
    rows = []
    for j, (cands, rets) in enumerate(zip(candidates_per_iteration, returns_per_iteration)):
        uv = project(pca, cands)
        for k in range(len(rets)):
            rows.append((j, float(uv[k, 0]), float(uv[k, 1]), float(rets[k])))
    return rows


def action_space_surface(
    env, model, state, cem_cfg, seed: int, span: float, resolution: int
):
    """Reward surface over the top-2 PCA directions of a fresh
    action-sequence plan's candidates, centered on its solution."""
    cfg = replace(cem_cfg, record_candidates=True)
    outcome = planner.plan_pets(state, model, env.reward, env.spec, cfg, seed)
    cands = np.concatenate(outcome.candidates_per_iteration)
    pca = pca_fit(cands)
    tau, adim = cfg.horizon, env.spec.action_dim

    def objective(points):
        seqs = np.clip(
            points.reshape(-1, tau, adim), env.spec.action_low, env.spec.action_high
        )
        return dyn.batch_expected_returns(
            model, env.reward, state, lambda t, s: seqs[:, t], tau, points.shape[0]
        )

    grid, us, vs = surface_grid(objective, pca, outcome.solution, span, resolution)
    return grid, us, vs, pca, outcome


def parameter_space_surface(
    env, model, policy: FlatParams, state, cem_cfg, seed: int, span: float, resolution: int
):
    """Reward surface over the top-2 PCA directions of a parameter-space
    plan's candidates (uniform noise mode), centered on the solution."""
    cfg = replace(cem_cfg, record_candidates=True)
    outcome = planner.plan_poplin_p(
        state, policy, model, env.reward, env.spec, cfg, "uni", seed
    )
    cands = np.concatenate(outcome.candidates_per_iteration) + policy.values
    pca = pca_fit(cands)
    tau = cfg.horizon
    bounds = (env.spec.action_low, env.spec.action_high)

    def objective(points):
        def provider(t, s):
            return net.forward_population(policy.shape, points, s, bounds)

        return dyn.batch_expected_returns(
            model, env.reward, state, provider, tau, points.shape[0]
        )

    center = policy.values + outcome.solution
    grid, us, vs = surface_grid(objective, pca, center, span, resolution)
    return grid, us, vs, pca, outcome
