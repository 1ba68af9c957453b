"""Dynamics-model contracts: oracle fits, expectation propagation, rollouts."""

import numpy as np
import pytest

from conftest import collect_random_transitions
from poplin import dynamics, net
from poplin.dynamics import (
    DynamicsEnsemble,
    TransitionDataset,
    TrueDynamics,
    batch_expected_returns,
    expected_return,
    make_ensemble,
    normalized_mse,
    predict,
    train_dynamics,
)
from poplin.envs import EnvState, make_env
from poplin.errors import UsageError
from poplin.net import FlatParams, MlpShape


def linear_system_dataset(n, seed, gain=0.1):
    # oracle system: s' = s + gain * a
    rng = np.random.default_rng(seed)
    data = TransitionDataset(2, 2)
    for _ in range(n):
        s = rng.standard_normal(2)
        a = rng.standard_normal(2)
        data.add(s, a, s + gain * a, 0.0)
    return data


class TestTraining:
    def test_linear_system_reaches_oracle_accuracy(self):
        data = linear_system_dataset(5000, seed=0)
        ens = make_ensemble(2, 2, members=2, hidden=(32, 32), mode="deterministic", seed=1)
        ens = train_dynamics(ens, data, epochs=50, batch=256, seed=2)
        rng = np.random.default_rng(3)
        s = rng.standard_normal((500, 2))
        a = rng.standard_normal((500, 2))
        assert normalized_mse(ens, s, a, s + 0.1 * a) < 1e-4

    def test_probabilistic_mode_also_fits(self):
        data = linear_system_dataset(5000, seed=4)
        ens = make_ensemble(2, 2, members=2, hidden=(32, 32), mode="probabilistic", seed=5)
        ens = train_dynamics(ens, data, epochs=50, batch=256, seed=6)
        rng = np.random.default_rng(7)
        s = rng.standard_normal((500, 2))
        a = rng.standard_normal((500, 2))
        assert normalized_mse(ens, s, a, s + 0.1 * a) < 1e-4

    def test_zero_epochs_only_refits_normalizer(self):
        data = linear_system_dataset(200, seed=8)
        ens = make_ensemble(2, 2, members=3, hidden=(8,), seed=9)
        before = [m.values.copy() for m in ens.members]
        after = train_dynamics(ens, data, epochs=0, batch=32, seed=10)
        for b, a in zip(before, after.members):
            assert np.array_equal(b, a.values)
        assert not np.array_equal(after.normalizer.in_mean, ens.normalizer.in_mean)

    def test_empty_dataset_rejected(self):
        ens = make_ensemble(2, 2, members=1, hidden=(8,), seed=0)
        with pytest.raises(UsageError):
            train_dynamics(ens, TransitionDataset(2, 2), epochs=1, batch=8, seed=0)

    def test_training_is_copy_on_write(self):
        data = linear_system_dataset(300, seed=11)
        ens = make_ensemble(2, 2, members=2, hidden=(8,), seed=12)
        snapshot = [m.values.copy() for m in ens.members]
        train_dynamics(ens, data, epochs=3, batch=32, seed=13)
        for before, member in zip(snapshot, ens.members):
            assert np.array_equal(before, member.values)

    def test_loss_history_grows_per_epoch_and_member(self):
        data = linear_system_dataset(300, seed=14)
        ens = make_ensemble(2, 2, members=3, hidden=(8,), mode="deterministic", seed=15)
        ens = train_dynamics(ens, data, epochs=4, batch=64, seed=16)
        assert len(ens.loss_history) == 4 * 3
        ens = train_dynamics(ens, data, epochs=2, batch=64, seed=17)
        assert len(ens.loss_history) == 6 * 3
        epochs = [e for e, _, _ in ens.loss_history]
        assert max(epochs) == 5  # continues counting across calls

    def test_monotone_data_property_pendulum(self):
        env = make_env("pendulum")
        small_mses, large_mses = [], []
        held = collect_random_transitions(env, 500, seed=900)
        hs, ha, hn = held.states(), held.actions(), held.next_states()
        for seed in range(3):
            small = collect_random_transitions(env, 1000, seed=100 + seed)
            large = collect_random_transitions(env, 6000, seed=200 + seed)
            for data, sink in ((small, small_mses), (large, large_mses)):
                ens = make_ensemble(3, 1, members=2, hidden=(24, 24),
                                    mode="deterministic", seed=seed)
                ens = train_dynamics(ens, data, epochs=15, batch=128, seed=seed)
                sink.append(normalized_mse(ens, hs, ha, hn))
        assert np.mean(large_mses) <= np.mean(small_mses)

    def test_state_scaling_keeps_normalized_mse_comparable(self):
        env = make_env("pendulum")
        base = collect_random_transitions(env, 2000, seed=42)
        held = collect_random_transitions(env, 400, seed=43)

        def run(scale):
            data = TransitionDataset(3, 1)
            for s, a, ns in zip(base.states(), base.actions(), base.next_states()):
                data.add(scale * s, a, scale * ns, 0.0)
            ens = make_ensemble(3, 1, members=2, hidden=(24, 24),
                                mode="deterministic", seed=1)
            ens = train_dynamics(ens, data, epochs=15, batch=128, seed=2)
            return normalized_mse(
                ens, scale * held.states(), held.actions(), scale * held.next_states()
            )

        m1, m10 = run(1.0), run(10.0)
        assert abs(m10 - m1) <= 0.10 * max(m1, m10)


def analytic_linear_member(gain=0.1):
    # exact map [s; a] -> delta = gain * a as a hidden-free affine member
    shape = MlpShape((4, 2), "swish")
    values = np.zeros(net.param_count(shape))
    w = np.zeros((2, 4))
    w[:, 2:] = gain * np.eye(2)
    values[:8] = w.ravel()
    return FlatParams(values, shape)


class TestPredict:
    def test_analytic_member_reproduces_linear_map(self):
        ens = DynamicsEnsemble(
            [analytic_linear_member()],
            dynamics._identity_normalizer(4, 2),
            state_dim=2,
            action_dim=2,
            mode="deterministic",
        )
        rng = np.random.default_rng(0)
        for _ in range(20):
            s, a = rng.standard_normal(2), rng.standard_normal(2)
            assert np.max(np.abs(predict(ens, s, a) - (s + 0.1 * a))) <= 1e-10

    def test_two_members_average(self):
        shape = MlpShape((4, 2), "swish")
        plus = np.zeros(net.param_count(shape))
        plus[8:] = [1.0, 0.0]  # bias-only member: delta = (+1, 0)
        minus = np.zeros(net.param_count(shape))
        minus[8:] = [-1.0, 0.0]
        ens = DynamicsEnsemble(
            [FlatParams(plus, shape), FlatParams(minus, shape)],
            dynamics._identity_normalizer(4, 2),
            state_dim=2,
            action_dim=2,
            mode="deterministic",
        )
        s = np.array([0.3, -0.4])
        assert np.array_equal(predict(ens, s, np.zeros(2)), s)

    def test_trained_pendulum_ensemble_close_to_simulator(self):
        env = make_env("pendulum")
        data = collect_random_transitions(env, 4000, seed=21)
        ens = make_ensemble(3, 1, members=3, hidden=(32, 32), seed=22)
        ens = train_dynamics(ens, data, epochs=30, batch=128, seed=23)
        held = collect_random_transitions(env, 100, seed=24)
        pred = predict(ens, held.states(), held.actions())
        assert np.max(np.abs(pred - held.next_states())) <= 0.05

    def test_batch_matches_single(self):
        env = make_env("pendulum")
        data = collect_random_transitions(env, 500, seed=25)
        ens = make_ensemble(3, 1, members=2, hidden=(16,), seed=26)
        ens = train_dynamics(ens, data, epochs=5, batch=64, seed=27)
        s, a = data.states()[:10], data.actions()[:10]
        batch = predict(ens, s, a)
        for i in range(10):
            assert np.max(np.abs(batch[i] - predict(ens, s[i], a[i]))) <= 1e-12

    def test_non_finite_input_rejected(self):
        ens = make_ensemble(2, 1, members=1, hidden=(4,), seed=0)
        with pytest.raises(UsageError):
            predict(ens, np.array([np.nan, 0.0]), np.array([0.0]))


class TestExpectedReturn:
    def test_zero_horizon_returns_zero(self):
        env = make_env("pendulum")
        model = TrueDynamics(env)
        ret = expected_return(model, env.reward, env.reset(0).observation,
                              lambda t, s: np.zeros(1), 0)
        assert ret == 0.0

    def test_upright_zero_actions_maximal(self):
        env = make_env("pendulum")
        model = TrueDynamics(env)
        upright = np.array([1.0, 0.0, 0.0])
        ret = expected_return(model, env.reward, upright, lambda t, s: np.zeros(1), 30)
        assert abs(ret - 0.0) <= 1e-6

    def test_matches_simulator_rollout(self):
        env = make_env("pendulum")
        model = TrueDynamics(env)
        rng = np.random.default_rng(31)
        for trial in range(10):
            actions = rng.uniform(env.spec.action_low, env.spec.action_high, (25, 1))
            start = env.reset(trial)
            ret = expected_return(model, env.reward, start.observation,
                                  lambda t, s: actions[t], 25)
            state, total = start, 0.0
            for t in range(25):
                state, reward = env.step(state, actions[t])
                total += reward
            assert abs(ret - total) <= 1e-8

    def test_deterministic(self):
        env = make_env("pendulum")
        data = collect_random_transitions(env, 400, seed=32)
        ens = make_ensemble(3, 1, members=2, hidden=(16,), seed=33)
        ens = train_dynamics(ens, data, epochs=5, batch=64, seed=34)
        start = env.reset(3).observation
        acts = np.random.default_rng(35).uniform(-2, 2, (20, 1))
        r1 = expected_return(ens, env.reward, start, lambda t, s: acts[t], 20)
        r2 = expected_return(ens, env.reward, start, lambda t, s: acts[t], 20)
        assert r1 == r2

    def test_diverging_rollout_disqualified_not_raised(self):
        class Exploder:
            def predict(self, s, a):
                return s * 1e200  # overflows to inf within a few steps

        env = make_env("pendulum")
        with np.errstate(over="ignore"):
            ret = expected_return(Exploder(), env.reward, np.ones(3),
                                  lambda t, s: np.zeros(1), 10)
        assert ret == -np.inf

    def test_batch_matches_loop(self):
        env = make_env("pendulum")
        model = TrueDynamics(env)
        start = env.reset(5).observation
        rng = np.random.default_rng(36)
        seqs = rng.uniform(-2, 2, (8, 15, 1))
        batch = batch_expected_returns(
            model, env.reward, start, lambda t, s: seqs[:, t], 15, 8
        )
        for k in range(8):
            single = expected_return(model, env.reward, start, lambda t, s: seqs[k, t], 15)
            assert abs(batch[k] - single) <= 1e-9


class TestCheckpointAndDataset:
    def test_ensemble_roundtrip_preserves_predictions(self, tmp_path):
        env = make_env("pendulum")
        data = collect_random_transitions(env, 400, seed=41)
        ens = make_ensemble(3, 1, members=2, hidden=(16,), seed=42)
        ens = train_dynamics(ens, data, epochs=3, batch=64, seed=43)
        dynamics.save_ensemble(tmp_path / "dyn", ens)
        loaded = dynamics.load_ensemble(tmp_path / "dyn")
        s, a = data.states()[:5], data.actions()[:5]
        assert np.array_equal(predict(ens, s, a), predict(loaded, s, a))

    def test_capacity_drops_oldest(self):
        data = TransitionDataset(1, 1, capacity=3)
        for i in range(5):
            data.add([float(i)], [0.0], [float(i + 1)], 0.0)
        assert len(data) == 3
        assert data.states()[0, 0] == 2.0

    def test_dimension_checks(self):
        data = TransitionDataset(2, 1)
        with pytest.raises(UsageError):
            data.add([0.0], [0.0], [0.0, 0.0], 0.0)
