"""Network contracts: exact gradients, flat-parameter round trips, Adam."""

import math

import numpy as np
import pytest

from poplin import net
from poplin.errors import UsageError
from poplin.net import FlatParams, MlpShape


def rand_bounds(rng, dim):
    low = rng.uniform(-2, -0.5, dim)
    return (low, low + rng.uniform(0.5, 2, dim))


def finite_difference_grad(params, x, output_grad, bounds, h=1e-5):
    grad = np.zeros_like(params.values)
    for i in range(len(grad)):
        plus = params.values.copy()
        plus[i] += h
        minus = params.values.copy()
        minus[i] -= h
        f_plus = net.forward(FlatParams(plus, params.shape), x, bounds) @ output_grad
        f_minus = net.forward(FlatParams(minus, params.shape), x, bounds) @ output_grad
        grad[i] = (f_plus - f_minus) / (2 * h)
    return grad


class TestForward:
    def test_zero_params_give_midpoint(self):
        shape = MlpShape((4, 16, 3))
        params = net.zero_params(shape)
        bounds = (np.array([-1.0, 0.0, 2.0]), np.array([1.0, 4.0, 3.0]))
        out = net.forward(params, np.array([0.3, -1.2, 5.0, 0.0]), bounds)
        assert np.array_equal(out, np.array([0.0, 2.0, 2.5]))

    def test_forward_is_pure(self):
        shape = MlpShape((3, 8, 2))
        params = net.init_params(shape, 0)
        x = np.array([0.1, -0.4, 2.0])
        bounds = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        assert np.array_equal(
            net.forward(params, x, bounds), net.forward(params, x, bounds)
        )

    def test_single_layer_identity_matches_tanh_table(self):
        # hand-checked values of tanh at the probe points
        shape = MlpShape((3, 3))
        weights = np.eye(3).ravel()
        params = FlatParams(np.concatenate([weights, np.zeros(3)]), shape)
        bounds = (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
        x = np.array([0.5, -1.25, 2.0])
        out = net.forward(params, x, bounds)
        table = np.array([math.tanh(0.5), math.tanh(-1.25), math.tanh(2.0)])
        assert np.max(np.abs(out - table)) <= 1e-12

    def test_dimension_mismatch(self):
        params = net.zero_params(MlpShape((3, 2)))
        with pytest.raises(UsageError):
            net.forward(params, np.zeros(4))

    def test_output_always_within_bounds(self):
        rng = np.random.default_rng(5)
        shape = MlpShape((3, 16, 2))
        bounds = rand_bounds(rng, 2)
        for _ in range(50):
            params = FlatParams(rng.standard_normal(net.param_count(shape)) * 5, shape)
            out = net.forward(params, rng.standard_normal(3) * 10, bounds)
            assert np.all(out >= bounds[0]) and np.all(out <= bounds[1])


class TestBackward:
    def test_zero_output_grad(self):
        shape = MlpShape((3, 8, 2))
        params = net.init_params(shape, 1)
        grad = net.backward(params, np.ones(3), np.zeros(2))
        assert np.array_equal(grad.values, np.zeros_like(grad.values))

    def test_linear_in_output_grad(self):
        shape = MlpShape((3, 8, 2))
        params = net.init_params(shape, 2)
        x = np.array([0.2, 0.5, -1.0])
        g1 = net.backward(params, x, np.array([1.0, 0.0]))
        g2 = net.backward(params, x, np.array([0.0, 1.0]))
        both = net.backward(params, x, np.array([1.0, 1.0]))
        assert np.max(np.abs(both.values - (g1.values + g2.values))) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        hidden = tuple(rng.integers(2, 6, size=rng.integers(0, 3)))
        sizes = (int(rng.integers(1, 4)),) + hidden + (int(rng.integers(1, 3)),)
        activation = "swish" if seed % 2 else "tanh"
        shape = MlpShape(sizes, activation)
        params = FlatParams(rng.standard_normal(net.param_count(shape)), shape)
        x = rng.standard_normal(sizes[0])
        output_grad = rng.standard_normal(sizes[-1])
        bounds = rand_bounds(rng, sizes[-1]) if seed % 2 == 0 else None
        analytic = net.backward(params, x, output_grad, bounds).values
        numeric = finite_difference_grad(params, x, output_grad, bounds)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4

    def test_batch_backward_sums_per_example(self):
        shape = MlpShape((2, 4, 1))
        params = net.init_params(shape, 3)
        xs = np.random.default_rng(4).standard_normal((5, 2))
        gs = np.random.default_rng(5).standard_normal((5, 1))
        batch = net.backward(params, xs, gs).values
        summed = sum(net.backward(params, xs[i], gs[i]).values for i in range(5))
        assert np.max(np.abs(batch - summed)) <= 1e-12

    def test_input_grad_matches_finite_differences(self):
        shape = MlpShape((3, 6, 2))
        rng = np.random.default_rng(9)
        params = FlatParams(rng.standard_normal(net.param_count(shape)), shape)
        x = rng.standard_normal(3)
        g = rng.standard_normal(2)
        _, input_grad = net.backward_with_input(params, x, g)
        h = 1e-6
        for i in range(3):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            num = (net.forward(params, xp) @ g - net.forward(params, xm) @ g) / (2 * h)
            assert abs(input_grad[i] - num) <= 1e-5


class TestFlattening:
    def test_roundtrip_bitwise_over_random_shapes(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            depth = rng.integers(0, 4)
            sizes = tuple(int(s) for s in rng.integers(1, 9, size=depth + 2))
            shape = MlpShape(sizes)
            params = FlatParams(rng.standard_normal(net.param_count(shape)), shape)
            rebuilt = net.flatten(net.unflatten(params), shape)
            assert np.array_equal(rebuilt.values, params.values)

    def test_layer_order_is_weights_then_bias_row_major(self):
        shape = MlpShape((2, 3))
        values = np.arange(9.0)
        (w, b), = net.unflatten(FlatParams(values, shape))
        assert np.array_equal(w, np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]]))
        assert np.array_equal(b, np.array([6.0, 7.0, 8.0]))

    def test_wrong_length_rejected(self):
        with pytest.raises(UsageError):
            FlatParams(np.zeros(5), MlpShape((2, 3)))


class TestPerturbedForward:
    def test_zero_noise_is_identity(self):
        shape = MlpShape((3, 8, 1))
        params = net.init_params(shape, 6)
        x = np.array([1.0, -2.0, 0.5])
        bounds = (np.array([-2.0]), np.array([2.0]))
        assert np.array_equal(
            net.perturbed_forward(params, net.zero_params(shape), x, bounds),
            net.forward(params, x, bounds),
        )

    def test_zero_params_plus_noise_equals_noise_forward(self):
        shape = MlpShape((3, 8, 1))
        noise = net.init_params(shape, 7)
        x = np.array([0.3, 0.1, -0.7])
        assert np.array_equal(
            net.perturbed_forward(net.zero_params(shape), noise, x),
            net.forward(noise, x),
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(UsageError):
            net.perturbed_forward(
                net.zero_params(MlpShape((3, 1))),
                net.zero_params(MlpShape((3, 2))),
                np.zeros(3),
            )

    def test_output_shift_vanishes_with_noise_scale(self):
        shape = MlpShape((3, 16, 2))
        params = net.init_params(shape, 8)
        bounds = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        x = np.array([0.5, -0.5, 1.5])
        base = net.forward(params, x, bounds)
        rng = np.random.default_rng(9)
        direction = rng.standard_normal(net.param_count(shape))
        shifts = []
        for sigma in (1e-1, 1e-3, 1e-5):
            noise = FlatParams(sigma * direction, shape)
            shifts.append(np.max(np.abs(net.perturbed_forward(params, noise, x, bounds) - base)))
        assert shifts[0] > shifts[1] > shifts[2]
        assert shifts[2] <= 1e-4


class TestPopulationForward:
    def test_matches_per_candidate_forward(self):
        rng = np.random.default_rng(10)
        shape = MlpShape((4, 8, 2))
        pm = rng.standard_normal((6, net.param_count(shape)))
        xs = rng.standard_normal((6, 4))
        bounds = rand_bounds(rng, 2)
        out = net.forward_population(shape, pm, xs, bounds)
        for k in range(6):
            ref = net.forward(FlatParams(pm[k], shape), xs[k], bounds)
            assert np.max(np.abs(out[k] - ref)) <= 1e-12


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        shape = MlpShape((2, 2))
        params = net.init_params(shape, 0)
        state = net.adam_init(len(params.values), 0.1)
        _, updated = net.adam_step(state, params, net.zero_params(shape))
        assert np.array_equal(updated.values, params.values)

    def test_constant_gradient_opposes_sign(self):
        shape = MlpShape((2, 2))
        params = net.zero_params(shape)
        grad = FlatParams(np.array([1.0, -2.0, 0.5, 1.0, -1.0, 3.0]), shape)
        state = net.adam_init(len(params.values), 0.01)
        for _ in range(20):
            state, params = net.adam_step(state, params, grad)
        assert np.all(np.sign(params.values) == -np.sign(grad.values))

    def test_first_step_matches_hand_expansion(self):
        # m1 = (1-b1) g, v1 = (1-b2) g^2; bias correction makes
        # m_hat = g and v_hat = g^2, so the step is -lr * g/(|g| + eps)
        shape = MlpShape((1, 1))
        params = net.zero_params(shape)
        grad = FlatParams(np.array([1.0, 1.0]), shape)
        state = net.adam_init(2, learning_rate=0.1)
        _, updated = net.adam_step(state, params, grad)
        expected = -0.1 * 1.0 / (1.0 + 1e-8)
        assert np.max(np.abs(updated.values - expected)) <= 1e-15


class TestCheckpoint:
    def test_save_load_roundtrip_bitwise(self, tmp_path):
        shape = MlpShape((3, 5, 2))
        params = net.init_params(shape, 11)
        path = tmp_path / "policy.bin"
        net.save_params(path, params)
        loaded = net.load_params(path)
        assert loaded.shape.layer_sizes == shape.layer_sizes
        assert np.array_equal(loaded.values, params.values)

    def test_header_is_little_endian_int64(self, tmp_path):
        shape = MlpShape((2, 1))
        params = net.zero_params(shape)
        path = tmp_path / "p.bin"
        net.save_params(path, params)
        raw = path.read_bytes()
        assert int.from_bytes(raw[:8], "little") == 2
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 1
        assert len(raw) == 24 + 8 * 3
