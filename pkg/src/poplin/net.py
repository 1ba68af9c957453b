"""Small fully-connected networks with exact hand-written backpropagation.

Parameters live in a single flat float64 vector (`FlatParams`) with a
reversible structured view, so a whole policy can be treated as one
search point and perturbed additively. Flattening order is frozen:
layer-major, weights before bias, row-major weight matrices (row i holds
the fan-in of output unit i).

Hidden activation is tanh for policies and swish for dynamics members.
When `bounds` is given, the final layer output is squashed through tanh
and rescaled into [low, high]; with `bounds=None` the output is linear
(used for regression heads and discriminator logits).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError

Bounds = tuple[np.ndarray, np.ndarray] | None


@dataclass(frozen=True)
class MlpShape:
    layer_sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise UsageError("need at least input and output sizes")
        if any(n <= 0 for n in self.layer_sizes):
            raise UsageError("layer sizes must be positive")
        if self.activation not in ("tanh", "swish"):
            raise UsageError(f"unknown activation {self.activation!r}")


def param_count(shape: MlpShape) -> int:
    sizes = shape.layer_sizes
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass(frozen=True)
class FlatParams:
    values: np.ndarray
    shape: MlpShape

    def __post_init__(self):
        if self.values.shape != (param_count(self.shape),):
            raise UsageError(
                f"parameter vector length {self.values.shape} does not match "
                f"shape {self.shape.layer_sizes} (needs {param_count(self.shape)})"
            )


def init_params(shape: MlpShape, seed: int) -> FlatParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) per layer, weights and bias."""
    rng = np.random.default_rng(seed)
    chunks = []
    sizes = shape.layer_sizes
    for i in range(len(sizes) - 1):
        bound = 1.0 / np.sqrt(sizes[i])
        chunks.append(rng.uniform(-bound, bound, sizes[i] * sizes[i + 1] + sizes[i + 1]))
    return FlatParams(np.concatenate(chunks), shape)


def zero_params(shape: MlpShape) -> FlatParams:
    return FlatParams(np.zeros(param_count(shape)), shape)


def unflatten(params: FlatParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (W, b) views into the flat vector. W has shape (out, in)."""
    sizes = params.shape.layer_sizes
    layers = []
    off = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = params.values[off : off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = params.values[off : off + n_out]
        off += n_out
        layers.append((w, b))
    return layers


def flatten(layers: list[tuple[np.ndarray, np.ndarray]], shape: MlpShape) -> FlatParams:
    return FlatParams(
        np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers]), shape
    )


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig + z * sig * (1.0 - sig)


def _forward_cached(params: FlatParams, x: np.ndarray, bounds: Bounds):
    layers = unflatten(params)
    act = params.shape.activation
    cache = []  # (input, pre-activation) per layer
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        cache.append((h, z))
        h = _activate(z, act) if i < len(layers) - 1 else z
    if bounds is not None:
        low, high = bounds
        mid = 0.5 * (low + high)
        half = 0.5 * (high - low)
        y = mid + half * np.tanh(h)
    else:
        y = h
    return y, h, cache


def forward(params: FlatParams, x: np.ndarray, bounds: Bounds = None) -> np.ndarray:
    """MLP output for a single input vector or an (N, in) batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != params.shape.layer_sizes[0]:
        raise UsageError(
            f"input dim {x.shape[-1]} != {params.shape.layer_sizes[0]}"
        )
    y, _, _ = _forward_cached(params, np.atleast_2d(x), bounds)
    return y[0] if single else y


def backward(
    params: FlatParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    bounds: Bounds = None,
) -> FlatParams:
    """Gradient of output_grad . forward(params, x) w.r.t. the parameters.

    For batched inputs the per-example gradients are summed.
    """
    grad, _ = backward_with_input(params, x, output_grad, bounds)
    return grad


def backward_with_input(
    params: FlatParams,
    x: np.ndarray,
    output_grad: np.ndarray,
    bounds: Bounds = None,
) -> tuple[FlatParams, np.ndarray]:
    """Like backward, but also returns the gradient w.r.t. the input."""
    x = np.asarray(x, dtype=np.float64)
    output_grad = np.asarray(output_grad, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    gb = np.atleast_2d(output_grad)
    if xb.shape[-1] != params.shape.layer_sizes[0]:
        raise UsageError(f"input dim {xb.shape[-1]} != {params.shape.layer_sizes[0]}")
    if gb.shape[-1] != params.shape.layer_sizes[-1]:
        raise UsageError(
            f"output_grad dim {gb.shape[-1]} != {params.shape.layer_sizes[-1]}"
        )
    if gb.shape[0] != xb.shape[0]:
        raise UsageError("x and output_grad batch sizes differ")

    layers = unflatten(params)
    act = params.shape.activation
    _, z_out, cache = _forward_cached(params, xb, bounds)

    if bounds is not None:
        low, high = bounds
        half = 0.5 * (high - low)
        t = np.tanh(z_out)
        delta = gb * half * (1.0 - t * t)
    else:
        delta = gb

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        h_in, z = cache[i]
        if i < len(layers) - 1:
            a = _activate(z, act)
            delta = delta * _activate_grad(z, a, act)
        gw = delta.T @ h_in
        gbias = delta.sum(axis=0)
        grads[i] = (gw, gbias)
        if i > 0:
            delta = delta @ layers[i][0]
    input_grad = delta @ layers[0][0]
    flat = flatten(grads, params.shape)
    return flat, (input_grad[0] if single else input_grad)


def perturbed_forward(
    params: FlatParams, noise: FlatParams, x: np.ndarray, bounds: Bounds = None
) -> np.ndarray:
    """forward(params + noise, x) without mutating either vector."""
    if noise.shape != params.shape:
        raise UsageError("noise shape does not match parameter shape")
    return forward(FlatParams(params.values + noise.values, params.shape), x, bounds)


def forward_population(
    shape: MlpShape, params_matrix: np.ndarray, inputs: np.ndarray, bounds: Bounds = None
) -> np.ndarray:
    """Forward pass where every row carries its own parameter vector.

    params_matrix is (K, P) and inputs is (K, in); returns (K, out). This
    is the planner's hot path: candidate k's policy is evaluated on
    candidate k's imagined state.
    """
    k, p = params_matrix.shape
    if p != param_count(shape):
        raise UsageError("params_matrix width does not match shape")
    sizes = shape.layer_sizes
    h = inputs
    off = 0
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = params_matrix[:, off : off + n_out * n_in].reshape(k, n_out, n_in)
        off += n_out * n_in
        b = params_matrix[:, off : off + n_out]
        off += n_out
        z = np.matmul(w, h[:, :, None])[:, :, 0] + b
        h = _activate(z, shape.activation) if i < n_layers - 1 else z
    if bounds is not None:
        low, high = bounds
        return 0.5 * (low + high) + 0.5 * (high - low) * np.tanh(h)
    return h


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(dim: int, learning_rate: float = 1e-3) -> AdamState:
    return AdamState(np.zeros(dim), np.zeros(dim), 0, learning_rate)


def adam_step_vec(
    state: AdamState, values: np.ndarray, grad: np.ndarray
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update on a bare vector."""
    if grad.shape != values.shape:
        raise UsageError("gradient length does not match parameters")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad**2
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_values = values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(
        m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon
    )
    return new_state, new_values


def adam_step(
    state: AdamState, params: FlatParams, grad: FlatParams
) -> tuple[AdamState, FlatParams]:
    """One bias-corrected Adam update; returns new state and new params."""
    new_state, new_values = adam_step_vec(state, params.values, grad.values)
    return new_state, FlatParams(new_values, params.shape)


def save_params(path: str | Path, params: FlatParams) -> None:
    """Flat binary record: little-endian int64 size count and sizes,
    then the float64 parameter values."""
    sizes = params.shape.layer_sizes
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}q", *sizes))
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path: str | Path, activation: str = "tanh") -> FlatParams:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<q", fh.read(8))
        sizes = struct.unpack(f"<{n}q", fh.read(8 * n))
        shape = MlpShape(tuple(int(s) for s in sizes), activation)
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return FlatParams(values, shape)
