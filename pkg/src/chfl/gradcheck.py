"""Self-contained gradient-check battery.

Random small models are checked against the central finite-difference
oracle: plain MLP weight/bias gradients, the softmax cross-entropy logit
gradient, and the unique/lateral gradients of the two-column model at
mu in {0, 0.3, 1.0}. Used by the test suite and the `gradcheck` CLI.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .columns import (
    ChflClientModel,
    LateralSet,
    chfl_backward_unique,
    chfl_forward,
    chfl_model_init,
    unique_side_arrays,
)
from .nn import (
    MlpParams,
    finite_diff_grad,
    grad_check_rel_error,
    mlp_backward,
    mlp_forward,
    mlp_init,
    onehot_encode,
    softmax_cross_entropy,
)

DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def _random_case(rng: np.random.Generator, depth: int):
    widths = rng.integers(2, 9, size=depth - 1).tolist()
    class_count = int(rng.integers(2, 5))
    d_in = int(rng.integers(2, 9))
    batch = int(rng.integers(1, 6))
    return d_in, widths, class_count, batch


def _jitter_biases(params: MlpParams, rng: np.random.Generator) -> None:
    # Zero-init biases can park a pre-activation exactly on the ReLU kink
    # (all-negative previous layer), where central differences are undefined;
    # checking at a generic point avoids that measure-zero pathology.
    for layer in params.layers:
        layer.biases += 0.1 * rng.standard_normal(layer.biases.shape)


def check_mlp(rng: np.random.Generator, depth: int, tolerance: float = DEFAULT_TOLERANCE) -> CheckResult:
    d_in, widths, class_count, batch = _random_case(rng, depth)
    params = mlp_init([d_in, *widths, class_count], rng)
    _jitter_biases(params, rng)
    x = rng.standard_normal((batch, d_in))
    labels = rng.integers(0, class_count, size=batch)
    onehot = onehot_encode(labels, class_count)

    logits, cache = mlp_forward(params, x)
    _, grad_logits = softmax_cross_entropy(logits, onehot)
    analytic = mlp_backward(params, cache, grad_logits).arrays()

    def loss_at(arrays) -> float:
        p = MlpParams.from_arrays(arrays)
        z, _ = mlp_forward(p, x)
        loss, _ = softmax_cross_entropy(z, onehot)
        return loss

    numeric = finite_diff_grad(loss_at, params.arrays())
    err = grad_check_rel_error(analytic, numeric)
    return CheckResult(f"mlp depth={depth} dims=[{d_in},{','.join(map(str, widths))},{class_count}]",
                       err, tolerance)


def check_softmax_grad(rng: np.random.Generator, tolerance: float = 1e-6) -> CheckResult:
    batch, class_count = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    logits = rng.standard_normal((batch, class_count)) * 3.0
    labels = rng.integers(0, class_count, size=batch)
    onehot = onehot_encode(labels, class_count)
    _, analytic = softmax_cross_entropy(logits, onehot)

    def loss_at(arrays) -> float:
        loss, _ = softmax_cross_entropy(arrays[0], onehot)
        return loss

    numeric = finite_diff_grad(loss_at, [logits])
    err = grad_check_rel_error([analytic], numeric)
    return CheckResult(f"softmax-xent B={batch} C={class_count}", err, tolerance)


def check_chfl_unique(
    rng: np.random.Generator, depth: int, mu: float, tolerance: float = DEFAULT_TOLERANCE
) -> CheckResult:
    d_c, widths, class_count, batch = _random_case(rng, depth)
    d_u = int(rng.integers(2, 9))
    model = chfl_model_init(d_c, d_u, widths, class_count, mu, rng, rng)
    _jitter_biases(model.common, rng)
    _jitter_biases(model.unique, rng)
    x_c = rng.standard_normal((batch, d_c))
    x_u = rng.standard_normal((batch, d_u))
    labels = rng.integers(0, class_count, size=batch)
    onehot = onehot_encode(labels, class_count)

    _, state = chfl_forward(model, x_c, x_u)
    _, grad_logits = softmax_cross_entropy(state.total_logits, onehot)
    unique_grads, lateral_grads = chfl_backward_unique(model, state, grad_logits)
    analytic = unique_grads.arrays() + lateral_grads

    n_unique = 2 * model.unique.depth

    def loss_at(arrays) -> float:
        unique = MlpParams.from_arrays(list(arrays[:n_unique]))
        lateral = LateralSet(list(arrays[n_unique:]), mu)
        trial = ChflClientModel(common=model.common, unique=unique, lateral=lateral)
        _, s = chfl_forward(trial, x_c, x_u)
        loss, _ = softmax_cross_entropy(s.total_logits, onehot)
        return loss

    numeric = finite_diff_grad(loss_at, unique_side_arrays(model))
    err = grad_check_rel_error(analytic, numeric)
    return CheckResult(f"chfl-unique depth={depth} mu={mu}", err, tolerance)


def run_gradient_checks(seed: int = 0, cases_per_depth: int = 2) -> list[CheckResult]:
    """The full battery over depths {2, 3} and mu in {0, 0.3, 1.0}."""
    rng = np.random.default_rng(seed)
    results = [check_softmax_grad(rng)]
    for depth in (2, 3):
        for _ in range(cases_per_depth):
            results.append(check_mlp(rng, depth))
        for mu in (0.0, 0.3, 1.0):
            results.append(check_chfl_unique(rng, depth, mu))
    return results
