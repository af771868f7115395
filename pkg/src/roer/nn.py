"""Minimal feed-forward network machinery on float64 numpy.

Hand-rolled reverse-mode gradients for a fixed MLP family (linear layers
with ReLU between, linear output): enough for desk-scale actor-critic
training with full determinism. Also provides exact input gradients and
the mixed parameter derivative of input gradients (needed to train
through a gradient-norm penalty), the Adam optimizer, and Polyak target
averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import binio


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


class ParameterSet:
    """Per-layer weight matrices (out x in) and bias vectors."""

    __slots__ = ("weights", "biases")

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "ParameterSet":
        return ParameterSet([w.copy() for w in self.weights],
                            [b.copy() for b in self.biases])

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet([np.zeros_like(w) for w in self.weights],
                            [np.zeros_like(b) for b in self.biases])

    def arrays(self):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"w{i}", w
            yield f"b{i}", b

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for _, a in self.arrays())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterSet) or other.n_layers != self.n_layers:
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in zip(
                [*self.weights, *self.biases], [*other.weights, *other.biases]
            )
        )


def init(spec: NetworkSpec, seed) -> ParameterSet:
    """Fan-in-scaled uniform initialization, deterministic given the seed.

    seed may be anything numpy accepts as generator seed material, or an
    existing Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for out_dim, in_dim in spec.layer_dims:
        bound = 1.0 / np.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(rng.uniform(-bound, bound, size=out_dim))
    return ParameterSet(weights, biases)


def _check_input(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(
            f"input shape {x.shape} incompatible with first layer "
            f"{params.weights[0].shape}"
        )
    return x


def forward(params: ParameterSet, x: np.ndarray) -> np.ndarray:
    y, _ = forward_cache(params, x)
    return y


def forward_cache(params: ParameterSet, x: np.ndarray):
    """Forward pass keeping pre-activations for backward()."""
    x = _check_input(params, x)
    L = params.n_layers
    pre = []
    h = x
    hidden = [x]
    for l in range(L):
        a = h @ params.weights[l].T + params.biases[l]
        pre.append(a)
        if l < L - 1:
            h = np.maximum(a, 0.0)
            hidden.append(h)
        else:
            h = a
    return h, (hidden, pre)


def backward(params: ParameterSet, x: np.ndarray, output_gradient: np.ndarray,
             cache=None):
    """Exact reverse-mode gradients of the forward map.

    output_gradient holds d(loss)/d(output) per sample; returns parameter
    gradients (summed over the batch) and d(loss)/d(input) per sample.
    """
    x = _check_input(params, x)
    if cache is None:
        _, cache = forward_cache(params, x)
    hidden, pre = cache
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != (x.shape[0], params.weights[-1].shape[0]):
        raise ShapeError(
            f"output_gradient shape {g.shape} mismatch with "
            f"({x.shape[0]}, {params.weights[-1].shape[0]})"
        )
    L = params.n_layers
    grads = params.zeros_like()
    for l in range(L - 1, -1, -1):
        grads.weights[l] += g.T @ hidden[l]
        grads.biases[l] += g.sum(axis=0)
        g = g @ params.weights[l]
        if l > 0:
            g = g * (pre[l - 1] > 0.0)
    return grads, g


def input_gradient(params: ParameterSet, x: np.ndarray, cache=None) -> np.ndarray:
    """Per-sample gradient of a scalar-output network w.r.t. its input."""
    if params.weights[-1].shape[0] != 1:
        raise ShapeError("input_gradient requires a scalar-output network")
    x = _check_input(params, x)
    if cache is None:
        _, cache = forward_cache(params, x)
    _, pre = cache
    g = np.ones((x.shape[0], 1))
    for l in range(params.n_layers - 1, -1, -1):
        g = g @ params.weights[l]
        if l > 0:
            g = g * (pre[l - 1] > 0.0)
    return g


def input_gradient_param_backward(params: ParameterSet, x: np.ndarray,
                                  cotangent: np.ndarray, cache=None) -> ParameterSet:
    """Parameter gradient of sum_i <g_i, c_i> where g_i is the input
    gradient of sample i and c_i the given cotangent row.

    Computed as reverse-mode over the directional-derivative (JVP) pass
    with the ReLU masks held fixed, which is the exact derivative almost
    everywhere. Biases only move activations, so their contribution is
    zero a.e.
    """
    x = _check_input(params, x)
    if cache is None:
        _, cache = forward_cache(params, x)
    _, pre = cache
    c = np.asarray(cotangent, dtype=np.float64)
    if c.shape != x.shape:
        raise ShapeError(f"cotangent shape {c.shape} != input shape {x.shape}")
    L = params.n_layers
    masks = [p > 0.0 for p in pre[:-1]]
    # tangent pass along direction c
    tangents = [c]
    t = c
    for l in range(L - 1):
        t = (t @ params.weights[l].T) * masks[l]
        tangents.append(t)
    grads = params.zeros_like()
    u = np.ones((x.shape[0], 1))
    for l in range(L - 1, -1, -1):
        grads.weights[l] += u.T @ tangents[l]
        if l > 0:
            u = (u @ params.weights[l]) * masks[l - 1]
    return grads


class AdamState:
    """Bias-corrected Adam over a ParameterSet; deterministic.

    Non-finite gradients skip the update and are counted rather than
    poisoning the moments.
    """

    def __init__(self, params: ParameterSet, learning_rate: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.skipped = 0

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        if not grads.all_finite():
            self.skipped += 1
            return params
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for group in ("weights", "biases"):
            ps = getattr(params, group)
            gs = getattr(grads, group)
            ms = getattr(self.m, group)
            vs = getattr(self.v, group)
            for p, g, m, v in zip(ps, gs, ms, vs):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_arrays(self):
        yield "m", self.m
        yield "v", self.v

    def scalars(self) -> np.ndarray:
        return np.array([self.step_count, self.skipped], dtype=np.int64)

    def restore_scalars(self, arr: np.ndarray) -> None:
        self.step_count = int(arr[0])
        self.skipped = int(arr[1])


class ScalarAdam:
    """Adam on a single scalar (temperature parameter)."""

    def __init__(self, learning_rate: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = 0.0
        self.v = 0.0
        self.step_count = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.skipped = 0

    def step(self, value: float, grad: float) -> float:
        if not np.isfinite(grad):
            self.skipped += 1
            return value
        self.step_count += 1
        t = self.step_count
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**t)
        vhat = self.v / (1.0 - self.beta2**t)
        return value - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)


def polyak(target: ParameterSet, online: ParameterSet, tau: float) -> ParameterSet:
    """In-place exponential averaging: target <- (1 - tau) target + tau online."""
    if not (0.0 < tau <= 1.0):
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for group in ("weights", "biases"):
        for t, o in zip(getattr(target, group), getattr(online, group)):
            if t.shape != o.shape:
                raise ShapeError("target/online parameter shape mismatch")
            t *= 1.0 - tau
            t += tau * o
    return target


def save_checkpoint(path_or_stream, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays in the shared versioned binary envelope."""
    binio.write_envelope(
        path_or_stream, binio.KIND_CHECKPOINT, binio.arrays_to_payload(arrays)
    )


def load_checkpoint(path_or_stream) -> dict[str, np.ndarray]:
    payload = binio.read_envelope(path_or_stream, binio.KIND_CHECKPOINT)
    return binio.payload_to_arrays(payload)
