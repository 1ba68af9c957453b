"""Policy distillation: behavior cloning, GAN training, parameter averaging.

BC regresses the policy onto executed planned actions with the target
network's parameter noise fixed to zero, so gradients always flow
through the unperturbed policy. GAN training matches the perturbed
policy's action distribution to the planned actions through a
discriminator on [state; action] pairs. AVG simply adds the mean of the
recorded optimized parameter noises to the policy parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import net
from .dynamics import TransitionDataset
from .errors import ConfigError, UsageError
from .net import FlatParams, MlpShape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    scheme: str = "none"  # none | bc | gan | avg
    epochs: int = 20
    batch: int = 64
    bc_learning_rate: float = 1e-3
    gan_gen_learning_rate: float = 1e-4
    gan_disc_learning_rate: float = 1e-3
    gan_noise_sigma: float = 0.1  # std of the z-noise; the initial CEM sigma
    gan_non_saturating: bool = True  # -log D generator loss; False = log(1 - D)
    data_source: str = "real"  # real | hallucination

    def __post_init__(self):
        if self.scheme not in ("none", "bc", "gan", "avg"):
            raise ConfigError(f"unknown distill scheme {self.scheme!r}")
        if self.data_source not in ("real", "hallucination"):
            raise ConfigError(f"unknown data source {self.data_source!r}")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("distill.epochs must be >= 0 and distill.batch >= 1")


@dataclass
class Discriminator:
    params: FlatParams  # [state; action] -> scalar logit, linear output
    entropy_penalty: float = 0.001

    def __post_init__(self):
        if self.entropy_penalty < 0:
            raise ConfigError("entropy penalty must be >= 0")
        if self.params.shape.layer_sizes[-1] != 1:
            raise ConfigError("discriminator must output a single logit")


def make_discriminator(
    state_dim: int,
    action_dim: int,
    hidden: tuple[int, ...] = (32,),
    seed: int = 0,
    entropy_penalty: float = 0.001,
) -> Discriminator:
    shape = MlpShape((state_dim + action_dim,) + tuple(hidden) + (1,))
    return Discriminator(net.init_params(shape, seed), entropy_penalty)


def _cloning_pairs(data: TransitionDataset, cfg: DistillConfig):
    """(state, planned action) pairs; hallucinated pairs appended when the
    data source asks for them. The initial random phase is excluded."""
    mask = data.planned_mask()
    states = data.states()[mask]
    actions = data.actions()[mask]
    if cfg.data_source == "hallucination" and data.hallucinated:
        h_states = np.array([s for s, _ in data.hallucinated])
        h_actions = np.array([a for _, a in data.hallucinated])
        states = np.concatenate([states, h_states])
        actions = np.concatenate([actions, h_actions])
    return states, actions


def distill_bc(
    policy: FlatParams,
    data: TransitionDataset,
    cfg: DistillConfig,
    seed: int,
    bounds,
) -> tuple[FlatParams, list[float]]:
    """Minibatch Adam on the mean squared action-cloning error.

    Returns the updated policy and the per-epoch loss curve.
    """
    states, actions = _cloning_pairs(data, cfg)
    if len(states) == 0:
        raise UsageError("no planned (state, action) pairs to clone")
    rng = np.random.default_rng(seed)
    opt = net.adam_init(len(policy.values), cfg.bc_learning_rate)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(states))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch):
            rows = order[start : start + cfg.batch]
            sb, ab = states[rows], actions[rows]
            pred = net.forward(policy, sb, bounds)
            err = pred - ab
            loss = float(np.mean(np.sum(err**2, axis=1)))
            grad = net.backward(policy, sb, 2.0 * err / len(rows), bounds)
            opt, policy = net.adam_step(opt, policy, grad)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return policy, losses


def bc_loss(policy: FlatParams, data: TransitionDataset, cfg: DistillConfig, bounds) -> float:
    states, actions = _cloning_pairs(data, cfg)
    if len(states) == 0:
        raise UsageError("no planned (state, action) pairs to score")
    err = net.forward(policy, states, bounds) - actions
    return float(np.mean(np.sum(err**2, axis=1)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _entropy_logit_grad(logits):
    # d/dl of binary entropy H(sigmoid(l)) = -l * p * (1 - p)
    p = _sigmoid(logits)
    return -logits * p * (1.0 - p)


def generator_gradient(
    policy: FlatParams,
    disc: Discriminator,
    states: np.ndarray,
    z: np.ndarray,
    bounds,
    non_saturating: bool = True,
) -> np.ndarray:
    """Gradient of the generator loss w.r.t. the policy parameters.

    z holds one parameter-noise row per state (the reparameterization);
    gradients are taken pathwise through the perturbed policy at
    theta + z_i and accumulate onto theta.
    """
    n = len(states)
    theta = policy.values
    actions = net.forward_population(policy.shape, theta + z, states, bounds)
    d_in = np.concatenate([states, actions], axis=1)
    logits = net.forward(disc.params, d_in)[:, 0]
    if non_saturating:
        dlogit = -(1.0 - _sigmoid(logits)) / n  # -log D
    else:
        dlogit = -_sigmoid(logits) / n  # log(1 - D)
    _, input_grad = net.backward_with_input(disc.params, d_in, dlogit[:, None])
    action_grad = input_grad[:, states.shape[1] :]
    total = np.zeros_like(theta)
    for i in range(n):
        perturbed = FlatParams(theta + z[i], policy.shape)
        total += net.backward(perturbed, states[i], action_grad[i], bounds).values
    return total


def distill_gan(
    policy: FlatParams,
    disc: Discriminator,
    data: TransitionDataset,
    cfg: DistillConfig,
    seed: int,
    bounds,
) -> tuple[FlatParams, Discriminator, list[tuple[float, float]]]:
    """Alternating discriminator/generator updates.

    The discriminator maximizes log D(s, a) + log(1 - D(s, pi_{theta+z}(s)))
    plus an entropy bonus on its own predictions; z is resampled per
    example from N(0, sigma0^2 I). The generator minimizes the
    non-saturating -log D form by default (the literal log(1 - D) form is
    a config flag). Only valid for parameter-space planners.
    """
    states, actions = _cloning_pairs(data, cfg)
    if len(states) == 0:
        raise UsageError("no planned (state, action) pairs for GAN training")
    rng = np.random.default_rng(seed)
    p = len(policy.values)
    gen_opt = net.adam_init(p, cfg.gan_gen_learning_rate)
    disc_opt = net.adam_init(len(disc.params.values), cfg.gan_disc_learning_rate)
    disc_params = disc.params
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(states))
        gen_epoch, disc_epoch = [], []
        for start in range(0, len(order), cfg.batch):
            rows = order[start : start + cfg.batch]
            sb, ab = states[rows], actions[rows]
            n = len(rows)
            z = cfg.gan_noise_sigma * rng.standard_normal((n, p))

            # discriminator step
            fake_actions = net.forward_population(policy.shape, policy.values + z, sb, bounds)
            real_in = np.concatenate([sb, ab], axis=1)
            fake_in = np.concatenate([sb, fake_actions], axis=1)
            both = np.concatenate([real_in, fake_in])
            logits = net.forward(disc_params, both)[:, 0]
            real_l, fake_l = logits[:n], logits[n:]
            pr, pf = _sigmoid(real_l), _sigmoid(fake_l)
            disc_loss = float(
                -np.mean(np.log(np.maximum(pr, 1e-12)))
                - np.mean(np.log(np.maximum(1.0 - pf, 1e-12)))
                - disc.entropy_penalty * _mean_entropy(logits)
            )
            dlogits = np.concatenate([(pr - 1.0) / n, pf / n])
            dlogits -= disc.entropy_penalty * _entropy_logit_grad(logits) / len(logits)
            dgrad = net.backward(disc_params, both, dlogits[:, None])
            disc_opt, disc_params = net.adam_step(disc_opt, disc_params, dgrad)

            # generator step against the updated discriminator
            z = cfg.gan_noise_sigma * rng.standard_normal((n, p))
            ggrad = generator_gradient(
                policy, Discriminator(disc_params, disc.entropy_penalty), sb, z,
                bounds, cfg.gan_non_saturating,
            )
            gen_opt, policy = net.adam_step(
                gen_opt, policy, FlatParams(ggrad, policy.shape)
            )
            gen_loss = float(
                _generator_loss(policy, disc_params, sb, z, bounds, cfg.gan_non_saturating)
            )
            disc_epoch.append(disc_loss)
            gen_epoch.append(gen_loss)
        losses.append((float(np.mean(gen_epoch)), float(np.mean(disc_epoch))))
    return policy, Discriminator(disc_params, disc.entropy_penalty), losses


def _mean_entropy(logits):
    p = np.clip(_sigmoid(logits), 1e-12, 1.0 - 1e-12)
    return float(np.mean(-p * np.log(p) - (1.0 - p) * np.log(1.0 - p)))


def _generator_loss(policy, disc_params, states, z, bounds, non_saturating):
    actions = net.forward_population(policy.shape, policy.values + z, states, bounds)
    logits = net.forward(disc_params, np.concatenate([states, actions], axis=1))[:, 0]
    p = np.clip(_sigmoid(logits), 1e-12, 1.0 - 1e-12)
    if non_saturating:
        return -np.mean(np.log(p))
    return np.mean(np.log(1.0 - p))


def distill_avg(policy: FlatParams, data: TransitionDataset) -> FlatParams:
    """theta += mean of the recorded optimized parameter noises; the
    records are cleared so the next iteration starts fresh."""
    if not data.noise_records:
        log.warning("distill_avg called with no noise records; policy unchanged")
        return policy
    noises = np.array([w for _, w in data.noise_records])
    if noises.shape[1] != len(policy.values):
        raise UsageError("recorded noise length does not match the policy")
    updated = FlatParams(policy.values + noises.mean(axis=0), policy.shape)
    data.noise_records.clear()
    return updated
