"""Dense-network numerical engine.

Plain-numpy building blocks: scaled-uniform init, ReLU forward pass,
manual backpropagation, softmax cross-entropy, Adam, and a central
finite-difference gradient oracle used to verify every analytic gradient
in this package.

Conventions: float64 everywhere; weight matrices are (n_out, n_in) so a
batch row vector x maps through x @ W.T + b; hidden layers use ReLU and
the final layer emits raw logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ArchitectureError,
    LabelError,
    NumericalError,
    ShapeError,
    StateError,
)


@dataclass
class DenseLayer:
    """One affine layer: weights (n_out, n_in) and biases (n_out,)."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ShapeError("dense layer expects a 2-d weight matrix and 1-d bias vector")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ShapeError(
                f"weight rows ({self.weights.shape[0]}) must equal bias length ({self.biases.shape[0]})"
            )


@dataclass
class MlpParams:
    """Ordered dense layers; the last layer is the (linear) output layer."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ArchitectureError("network needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weights.shape[1] != prev.weights.shape[0]:
                raise ShapeError(
                    f"layer input dim {cur.weights.shape[1]} does not chain with previous output dim {prev.weights.shape[0]}"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> list[int]:
        """[input_dim, n_1, ..., n_L]."""
        return [self.layers[0].weights.shape[1]] + [l.weights.shape[0] for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        """Flat [W1, b1, W2, b2, ...] view (references, not copies)."""
        flat: list[np.ndarray] = []
        for layer in self.layers:
            flat.append(layer.weights)
            flat.append(layer.biases)
        return flat

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "MlpParams":
        if len(arrays) % 2 != 0:
            raise ShapeError("expected an even number of arrays (W, b pairs)")
        layers = [DenseLayer(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(layers)

    def copy(self) -> "MlpParams":
        return MlpParams([DenseLayer(l.weights.copy(), l.biases.copy()) for l in self.layers])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [DenseLayer(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in self.layers]
        )


@dataclass
class ForwardCache:
    """Intermediates of one forward pass: input batch, per-layer pre-activations
    and activations. The last activation equals the last pre-activation (linear
    output layer)."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


@dataclass
class AdamState:
    """First/second moment estimates mirroring a flat parameter list."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def mlp_init(layer_dims: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Create an MLP with uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights and zero biases.

    Deterministic given the generator state.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ArchitectureError(f"need at least [input, output] dims, got {dims}")
    if any(int(d) != d or d < 1 for d in dims):
        raise ArchitectureError(f"all layer dims must be positive integers, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float64)
        b = np.zeros(fan_out, dtype=np.float64)
        layers.append(DenseLayer(w, b))
    return MlpParams(layers)


def mlp_forward(params: MlpParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """ReLU MLP forward pass; returns raw logits and the cache for backprop."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d (B, d), got shape {x.shape}")
    if x.shape[1] != params.layers[0].weights.shape[1]:
        raise ShapeError(
            f"batch width {x.shape[1]} does not match first layer input dim "
            f"{params.layers[0].weights.shape[1]}"
        )
    depth = params.depth
    pre: list[np.ndarray] = []
    act: list[np.ndarray] = []
    a = x
    for i, layer in enumerate(params.layers):
        z = a @ layer.weights.T + layer.biases
        pre.append(z)
        a = np.maximum(z, 0.0) if i < depth - 1 else z
        act.append(a)
    return act[-1], ForwardCache(inputs=x, pre_activations=pre, activations=act)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1 and are positive."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def softmax_cross_entropy(
    logits: np.ndarray, onehot: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    grad = (softmax(logits) - onehot) / B, which is the exact gradient of the
    returned mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} and onehot {onehot.shape} differ")
    if not np.all((onehot == 0.0) | (onehot == 1.0)) or not np.all(onehot.sum(axis=1) == 1.0):
        raise LabelError("each label row must be one-hot (exactly one 1, rest 0)")
    batch = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    true_logit = (shifted * onehot).sum(axis=1)
    loss = float(np.mean(logsumexp - true_logit))
    grad = (softmax(logits) - onehot) / batch
    return loss, grad


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_logits: np.ndarray) -> MlpParams:
    """Exact reverse-mode gradients w.r.t. every weight and bias.

    `grad_logits` is d(loss)/d(logits); the returned object is shaped like
    `params` and holds the gradients.
    """
    _check_cache(params, cache)
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != cache.activations[-1].shape:
        raise ShapeError(f"grad_logits shape {g.shape} does not match logits shape")
    grads: list[DenseLayer] = [None] * params.depth  # type: ignore[list-item]
    for i in range(params.depth - 1, -1, -1):
        a_prev = cache.activations[i - 1] if i > 0 else cache.inputs
        gw = g.T @ a_prev
        gb = g.sum(axis=0)
        grads[i] = DenseLayer(gw, gb)
        if i > 0:
            g = (g @ params.layers[i].weights) * (cache.pre_activations[i - 1] > 0.0)
    return MlpParams(grads)


def _check_cache(params: MlpParams, cache: ForwardCache) -> None:
    if len(cache.pre_activations) != params.depth:
        raise StateError(
            f"cache depth {len(cache.pre_activations)} does not match network depth {params.depth}"
        )
    for i, layer in enumerate(params.layers):
        if cache.pre_activations[i].shape[1] != layer.weights.shape[0]:
            raise StateError(f"cache layer {i} width does not match the parameters")
    if cache.inputs.shape[1] != params.layers[0].weights.shape[1]:
        raise StateError("cache input width does not match the parameters")


def adam_init(arrays: Sequence[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Zero-moment Adam state mirroring `arrays`."""
    return AdamState(
        first_moment=[np.zeros_like(a) for a in arrays],
        second_moment=[np.zeros_like(a) for a in arrays],
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update with bias correction over a flat parameter list.

    Returns fresh arrays and a fresh state; the inputs are not mutated.
    Non-finite gradient entries abort the step.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.first_moment):
        raise ShapeError("params, grads, and state must have the same number of arrays")
    for p, g, m in zip(arrays, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient entries; step aborted")
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_params: list[np.ndarray] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for p, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, first_moment=new_m, second_moment=new_v, step_count=t)


def finite_diff_grad(
    loss_fn: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    epsilon: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of `loss_fn` at `params`, entry by entry.

    The oracle against which all analytic gradients in this package are
    checked; O(2 * n_params) loss evaluations, so keep the models tiny.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in work]
    for a, g in zip(work, grads):
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_a.size):
            orig = flat_a[j]
            flat_a[j] = orig + epsilon
            f_plus = loss_fn(work)
            flat_a[j] = orig - epsilon
            f_minus = loss_fn(work)
            flat_a[j] = orig
            flat_g[j] = (f_plus - f_minus) / (2.0 * epsilon)
    return grads


def onehot_encode(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Integer labels in [0, C) to a one-hot float matrix."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a 1-d integer vector")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise LabelError(f"labels must lie in [0, {class_count})")
    out = np.zeros((labels.shape[0], class_count), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def grad_check_rel_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Max over entries of |analytic - numeric| / max(1, |analytic|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.abs(a))
        err = np.abs(a - n) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
