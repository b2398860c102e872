"""Two-column client model: shared-feature column, client-unique column,
and lateral connections.

The common column is a plain MLP over the shared features. The unique
column is an MLP over the client's own extra features whose layer i
(for i >= 2) additionally receives mu * U_i applied to the common
column's layer i-1 activation:

    z_u_i = relu(W_u_i z_u_{i-1} + b_u_i + mu * U_i z_c_{i-1})   (hidden)
    z_u_L =      W_u_L z_u_{L-1} + b_u_L + mu * U_L z_c_{L-1}    (output)

The first unique layer has no lateral input. Class probabilities come
from one softmax over the sum of both columns' output logits. Training
of the unique side treats the common column (and all its activations)
as constants, so the shared column's trajectory is never perturbed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .nn import (
    DenseLayer,
    ForwardCache,
    MlpParams,
    mlp_forward,
    mlp_init,
    softmax,
)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class LateralSet:
    """Lateral matrices for layers 2..L plus the fixed coupling scalar mu.

    matrices[j] connects the common column's layer j+1 activation into the
    unique column's layer j+2 pre-activation (1-based layer indexing), so
    matrices[j] has shape (unique width of layer j+2, common width of layer j+1).
    mu is a hyperparameter in [0, 1], never trained.
    """

    matrices: list[np.ndarray]
    mu: float

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        for u in self.matrices:
            if u.ndim != 2:
                raise ShapeError("lateral matrices must be 2-d")

    def copy(self) -> "LateralSet":
        return LateralSet([u.copy() for u in self.matrices], self.mu)


@dataclass
class ChflClientModel:
    """One client's full parameter set: common column, unique column, laterals."""

    common: MlpParams
    unique: MlpParams
    lateral: LateralSet

    def __post_init__(self):
        if self.common.depth != self.unique.depth:
            raise ShapeError(
                f"columns must have equal depth, got {self.common.depth} and {self.unique.depth}"
            )
        depth = self.common.depth
        if len(self.lateral.matrices) != depth - 1:
            raise ShapeError(
                f"expected {depth - 1} lateral matrices for depth {depth}, "
                f"got {len(self.lateral.matrices)}"
            )
        c_dims = self.common.dims
        u_dims = self.unique.dims
        for j, u in enumerate(self.lateral.matrices):
            want = (u_dims[j + 2], c_dims[j + 1])
            if u.shape != want:
                raise ShapeError(f"lateral matrix {j} has shape {u.shape}, expected {want}")


@dataclass
class ChflForwardState:
    """Caches of one coupled forward pass, one per column."""

    common: ForwardCache
    unique: ForwardCache

    @property
    def total_logits(self) -> np.ndarray:
        return self.common.activations[-1] + self.unique.activations[-1]


def lateral_init(
    common_dims: Sequence[int],
    unique_dims: Sequence[int],
    mu: float,
    rng: np.random.Generator,
) -> LateralSet:
    """Lateral matrices drawn with the same scaled-uniform scheme as mlp_init.

    Dimension lists are full chains [input, hidden..., classes]; the two lists
    must have equal length. Matrix i (feeding unique layer i+2) has shape
    (unique_dims[i+2], common_dims[i+1]) and fan-in common_dims[i+1].
    """
    c_dims = list(common_dims)
    u_dims = list(unique_dims)
    if len(c_dims) != len(u_dims):
        raise ShapeError(f"column dim chains differ in length: {c_dims} vs {u_dims}")
    if len(c_dims) < 3:
        raise ShapeError("need at least [input, hidden-or-output, output] dims for laterals")
    matrices = []
    for j in range(len(c_dims) - 2):
        fan_in = c_dims[j + 1]
        bound = np.sqrt(6.0 / fan_in)
        matrices.append(
            rng.uniform(-bound, bound, size=(u_dims[j + 2], fan_in)).astype(np.float64)
        )
    return LateralSet(matrices, mu)


def chfl_model_init(
    common_input_dim: int,
    unique_input_dim: int,
    hidden_widths: Sequence[int],
    class_count: int,
    mu: float,
    common_rng: np.random.Generator,
    unique_rng: np.random.Generator,
) -> ChflClientModel:
    """Fresh client model; common and unique columns share hidden widths.

    The two RNGs keep the common column's draw independent from the
    unique/lateral draws, which is what lets a federated run reuse the same
    common stream regardless of the unique side.
    """
    c_dims = [common_input_dim, *hidden_widths, class_count]
    u_dims = [unique_input_dim, *hidden_widths, class_count]
    common = mlp_init(c_dims, common_rng)
    unique = mlp_init(u_dims, unique_rng)
    lateral = lateral_init(c_dims, u_dims, mu, unique_rng)
    return ChflClientModel(common, unique, lateral)


def chfl_forward(
    model: ChflClientModel, x_common: np.ndarray, x_unique: np.ndarray
) -> tuple[np.ndarray, ChflForwardState]:
    """Coupled forward pass; returns class probabilities and both caches.

    Probabilities are softmax(common logits + unique logits). With mu = 0 the
    lateral term is skipped entirely, so the unique column sees nothing of the
    shared features.
    """
    x_c = np.asarray(x_common, dtype=np.float64)
    x_u = np.asarray(x_unique, dtype=np.float64)
    if x_c.shape[0] != x_u.shape[0]:
        raise ShapeError(f"batch sizes differ: {x_c.shape[0]} vs {x_u.shape[0]}")
    _, common_cache = mlp_forward(model.common, x_c)

    if x_u.ndim != 2 or x_u.shape[1] != model.unique.layers[0].weights.shape[1]:
        raise ShapeError(
            f"unique batch width {x_u.shape} does not match unique column input dim"
        )
    mu = model.lateral.mu
    depth = model.unique.depth
    pre: list[np.ndarray] = []
    act: list[np.ndarray] = []
    a = x_u
    for i, layer in enumerate(model.unique.layers):
        z = a @ layer.weights.T + layer.biases
        if i >= 1 and mu != 0.0:
            z = z + mu * (common_cache.activations[i - 1] @ model.lateral.matrices[i - 1].T)
        pre.append(z)
        a = np.maximum(z, 0.0) if i < depth - 1 else z
        act.append(a)
    unique_cache = ForwardCache(inputs=x_u, pre_activations=pre, activations=act)

    state = ChflForwardState(common=common_cache, unique=unique_cache)
    return softmax(state.total_logits), state


def chfl_backward_unique(
    model: ChflClientModel,
    state: ChflForwardState,
    grad_total_logits: np.ndarray,
) -> tuple[MlpParams, list[np.ndarray]]:
    """Gradients of the aggregated-output loss w.r.t. the unique column and laterals.

    The common column and its activations are treated as constants: nothing
    flows back into them. Lateral gradients carry the mu factor, so mu = 0
    yields exactly zero lateral gradients.
    """
    _check_state(model, state)
    g = np.asarray(grad_total_logits, dtype=np.float64)
    if g.shape != state.unique.activations[-1].shape:
        raise ShapeError(f"grad shape {g.shape} does not match output logits shape")
    mu = model.lateral.mu
    depth = model.unique.depth
    unique_grads: list[DenseLayer] = [None] * depth  # type: ignore[list-item]
    lateral_grads: list[np.ndarray] = [None] * (depth - 1)  # type: ignore[list-item]
    for i in range(depth - 1, -1, -1):
        a_prev = state.unique.activations[i - 1] if i > 0 else state.unique.inputs
        unique_grads[i] = DenseLayer(g.T @ a_prev, g.sum(axis=0))
        if i >= 1:
            if mu != 0.0:
                lateral_grads[i - 1] = mu * (g.T @ state.common.activations[i - 1])
            else:
                lateral_grads[i - 1] = np.zeros_like(model.lateral.matrices[i - 1])
            g = (g @ model.unique.layers[i].weights) * (state.unique.pre_activations[i - 1] > 0.0)
    return MlpParams(unique_grads), lateral_grads


def common_logits(model: ChflClientModel, x_common: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass of the common column alone (used for its own loss/update)."""
    return mlp_forward(model.common, x_common)


def _check_state(model: ChflClientModel, state: ChflForwardState) -> None:
    if len(state.unique.pre_activations) != model.unique.depth:
        raise StateError("forward state depth does not match the model")
    for i, layer in enumerate(model.unique.layers):
        if state.unique.pre_activations[i].shape[1] != layer.weights.shape[0]:
            raise StateError(f"forward state layer {i} width does not match the model")
    if state.common.inputs.shape[0] != state.unique.inputs.shape[0]:
        raise StateError("column caches carry different batch sizes")


def unique_side_arrays(model: ChflClientModel) -> list[np.ndarray]:
    """Flat trainable-local list: unique column arrays then lateral matrices."""
    return model.unique.arrays() + list(model.lateral.matrices)


def replace_unique_side(model: ChflClientModel, arrays: Sequence[np.ndarray]) -> ChflClientModel:
    """Rebuild the model from a flat list produced by unique_side_arrays."""
    n_unique = 2 * model.unique.depth
    unique = MlpParams.from_arrays(list(arrays[:n_unique]))
    lateral = LateralSet(list(arrays[n_unique:]), model.lateral.mu)
    return ChflClientModel(common=model.common, unique=unique, lateral=lateral)


def save_model(path, model: ChflClientModel) -> None:
    """Serialize a client model to .npz with a versioned header.

    Keys: header (json: version, mu, depth, dims) plus common_w_i/common_b_i,
    unique_w_i/unique_b_i, and lateral_i arrays.
    """
    header = json.dumps(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "mu": model.lateral.mu,
            "common_dims": model.common.dims,
            "unique_dims": model.unique.dims,
        },
        sort_keys=True,
    )
    payload: dict[str, np.ndarray] = {"header": np.frombuffer(header.encode(), dtype=np.uint8)}
    for i, layer in enumerate(model.common.layers):
        payload[f"common_w_{i}"] = layer.weights
        payload[f"common_b_{i}"] = layer.biases
    for i, layer in enumerate(model.unique.layers):
        payload[f"unique_w_{i}"] = layer.weights
        payload[f"unique_b_{i}"] = layer.biases
    for i, u in enumerate(model.lateral.matrices):
        payload[f"lateral_{i}"] = u
    np.savez(path, **payload)


def load_model(path) -> ChflClientModel:
    """Inverse of save_model; rejects unknown format versions."""
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(
                f"unsupported checkpoint format version {header.get('format_version')}"
            )
        depth = len(header["common_dims"]) - 1
        common = MlpParams(
            [DenseLayer(data[f"common_w_{i}"], data[f"common_b_{i}"]) for i in range(depth)]
        )
        unique = MlpParams(
            [DenseLayer(data[f"unique_w_{i}"], data[f"unique_b_{i}"]) for i in range(depth)]
        )
        lateral = LateralSet([data[f"lateral_{i}"] for i in range(depth - 1)], header["mu"])
    return ChflClientModel(common, unique, lateral)
