"""Training protocols over simulated clients.

Four methods share one server loop shape: broadcast, local training, fixed
order aggregation, evaluation.

* fedavg ("Common"): plain federated averaging over the shared features.
* chfl: federated common column plus per-client unique column and laterals;
  the unique side trains against the aggregated output without ever touching
  the common column's update.
* local: per-client model over all of that client's features, no federation.
* concat: federated common column, plus a per-client net fed with the unique
  features concatenated with the common net's raw output logits.

Determinism contract: the common-column trajectory is a function of
(param_seed, batch_seed, data, config) only. Unique columns, laterals, local
nets, and concat nets draw from separate RNG streams, so running chfl or
concat yields bit-identical common parameters to running fedavg with the
same seeds. Clients are simulated sequentially in client order, which is
also the aggregation order.

Per-client Adam moments for unique/lateral/local/concat parameters persist
across rounds; the common column's moments restart every round because the
server exchanges parameters only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .columns import (
    ChflClientModel,
    LateralSet,
    chfl_backward_unique,
    chfl_forward,
    lateral_init,
    replace_unique_side,
    unique_side_arrays,
)
from .data import TRAIN, VAL, TEST, ClientDataset
from .errors import AggregationError, ConfigError, ShapeError, StateError
from .nn import (
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_init,
    onehot_encode,
    softmax_cross_entropy,
)


class Method(str, enum.Enum):
    COMMON = "common"
    LOCAL = "local"
    CHFL_MU0 = "chfl_mu0"
    CHFL = "chfl"
    CONCAT = "concat"


# Canonical reporting order (Common, Local, mu=0, mu>0, concat).
METHOD_ORDER = [Method.COMMON, Method.LOCAL, Method.CHFL_MU0, Method.CHFL, Method.CONCAT]


@dataclass(frozen=True)
class FederationConfig:
    """Knobs of one training run; seeds may be ints or tuples of ints."""

    clients: int = 5
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    mu: float = 0.0
    hidden_widths: tuple[int, ...] = (512, 256, 128)
    param_seed: int | tuple[int, ...] = 0
    batch_seed: int | tuple[int, ...] = 1
    method: str | None = None
    early_stop_patience: int | None = None
    # Algorithm-2 line order computes the unique-side loss against the
    # already-updated local common column; set False for the pre-update variant.
    unique_step_uses_updated_common: bool = True
    self_check: bool = True

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError(f"clients must be >= 1, got {self.clients}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if len(self.hidden_widths) < 1:
            raise ConfigError("need at least one hidden layer width")


@dataclass
class RoundState:
    """Server-side state between rounds (mainly useful for introspection)."""

    round_index: int
    common: MlpParams
    client_models: list[ChflClientModel | None]
    client_optimizer_states: list[AdamState | None]


@dataclass
class RunResult:
    per_client_val_acc: list[float]
    per_client_test_acc: list[float]
    rounds_run: int
    epochs_run: int

    @property
    def mean_test_acc(self) -> float:
        return float(np.nanmean(self.per_client_test_acc))

    @property
    def mean_val_acc(self) -> float:
        return float(np.nanmean(self.per_client_val_acc))


@dataclass
class FedAvgResult(RunResult):
    common: MlpParams = None  # type: ignore[assignment]


@dataclass
class ChflResult(RunResult):
    common: MlpParams = None  # type: ignore[assignment]
    models: list[ChflClientModel | None] = field(default_factory=list)


@dataclass
class LocalResult(RunResult):
    models: list[MlpParams] = field(default_factory=list)


@dataclass
class ConcatResult(RunResult):
    common: MlpParams = None  # type: ignore[assignment]
    unique_nets: list[MlpParams] = field(default_factory=list)


OnRound = Callable[[int, list[float], list[float]], None]


def _seed_key(seed, *parts: int) -> list[int]:
    head = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return head + list(parts)


def aggregate(param_sets: Sequence[MlpParams]) -> MlpParams:
    """Unweighted elementwise mean over clients, Eq.-style theta = (1/K) sum.

    Computed as base + mean(deltas) in fixed client order: algebraically the
    same mean, but bit-exact on identical inputs (a plain sum/K round-trips
    only for power-of-two K) and still deterministic for fixed order.
    """
    if not param_sets:
        raise AggregationError("cannot aggregate an empty parameter list")
    base_arrays = param_sets[0].arrays()
    all_arrays = [base_arrays]
    for other in param_sets[1:]:
        arrays = other.arrays()
        if len(arrays) != len(base_arrays) or any(
            a.shape != b.shape for a, b in zip(arrays, base_arrays)
        ):
            raise AggregationError("parameter sets differ in shape")
        all_arrays.append(arrays)
    k = len(param_sets)
    out = []
    for j, ref in enumerate(base_arrays):
        acc = np.zeros_like(ref)
        for arrays in all_arrays:
            acc += arrays[j] - ref
        out.append(ref + acc / k)
    return MlpParams.from_arrays(out)


def _params_equal(a: MlpParams, b: MlpParams) -> bool:
    return all(
        np.array_equal(x.weights, y.weights) and np.array_equal(x.biases, y.biases)
        for x, y in zip(a.layers, b.layers)
    )


def _common_step(
    params: MlpParams,
    adam: AdamState,
    xb: np.ndarray,
    yb: np.ndarray,
    class_count: int,
    lr: float,
) -> tuple[MlpParams, AdamState]:
    logits, cache = mlp_forward(params, xb)
    _, grad_logits = softmax_cross_entropy(logits, onehot_encode(yb, class_count))
    grads = mlp_backward(params, cache, grad_logits)
    arrays, adam = adam_step(params.arrays(), grads.arrays(), adam, lr)
    return MlpParams.from_arrays(arrays), adam


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch of minibatch index slices; the final partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def client_local_fedavg(
    k: int,
    theta_start: MlpParams,
    x_common: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    cfg: FederationConfig,
    batch_rng: np.random.Generator,
) -> MlpParams:
    """E local epochs of Adam on the cross-entropy over shared features only."""
    n = labels.shape[0]
    if n == 0:
        raise ConfigError(f"client {k} has no training rows")
    params = theta_start.copy()
    if cfg.self_check and not _params_equal(params, theta_start):
        raise StateError(f"client {k} broadcast copy differs from the server parameters")
    adam = adam_init(params.arrays())
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, batch_rng):
            params, adam = _common_step(
                params, adam, x_common[idx], labels[idx], class_count, cfg.learning_rate
            )
    return params


def client_local_chfl(
    k: int,
    theta_c_start: MlpParams,
    unique: MlpParams,
    lateral: LateralSet,
    x_common: np.ndarray,
    x_unique: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    cfg: FederationConfig,
    batch_rng: np.random.Generator,
    adam_unique: AdamState,
) -> tuple[MlpParams, MlpParams, LateralSet, AdamState]:
    """One client's round: per batch, a common-column step followed by a
    unique/lateral step against the aggregated output with the common side
    frozen. Returns (theta_c_k, unique', lateral', adam_unique')."""
    n = labels.shape[0]
    if n == 0:
        raise ConfigError(f"client {k} has no training rows")
    params_c = theta_c_start.copy()
    if cfg.self_check and not _params_equal(params_c, theta_c_start):
        raise StateError(f"client {k} broadcast copy differs from the server parameters")
    adam_c = adam_init(params_c.arrays())
    model = ChflClientModel(common=params_c, unique=unique, lateral=lateral)
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, batch_rng):
            xb_c, xb_u, yb = x_common[idx], x_unique[idx], labels[idx]
            if not cfg.unique_step_uses_updated_common:
                _, state = chfl_forward(model, xb_c, xb_u)
            params_c, adam_c = _common_step(
                params_c, adam_c, xb_c, yb, class_count, cfg.learning_rate
            )
            model = ChflClientModel(common=params_c, unique=model.unique, lateral=model.lateral)
            if cfg.unique_step_uses_updated_common:
                _, state = chfl_forward(model, xb_c, xb_u)
            _, grad_logits = softmax_cross_entropy(
                state.total_logits, onehot_encode(yb, class_count)
            )
            unique_grads, lateral_grads = chfl_backward_unique(model, state, grad_logits)
            arrays, adam_unique = adam_step(
                unique_side_arrays(model),
                unique_grads.arrays() + lateral_grads,
                adam_unique,
                cfg.learning_rate,
            )
            model = replace_unique_side(model, arrays)
    return params_c, model.unique, model.lateral, adam_unique


def _accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.shape[0] == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _check_datasets(cfg: FederationConfig, datasets: Sequence[ClientDataset]) -> tuple[int, int]:
    if len(datasets) != cfg.clients:
        raise ConfigError(f"config says {cfg.clients} clients but got {len(datasets)} datasets")
    d_common = datasets[0].x_common.shape[1]
    class_count = datasets[0].class_count
    for k, ds in enumerate(datasets):
        if ds.x_common.shape[1] != d_common:
            raise ConfigError(f"client {k} has common width {ds.x_common.shape[1]}, expected {d_common}")
        if ds.class_count != class_count:
            raise ConfigError(f"client {k} disagrees on the class count")
    return d_common, class_count


class _EarlyStop:
    """Validation plateau detector with best-round selection.

    When a patience is set, `update` reports (improved, stop); the caller
    snapshots its state on improvement and restores the snapshot at the end,
    so the run returns the best-validation round rather than the last one.
    Without a patience the detector is inert and runs keep their final state.
    """

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = -np.inf
        self.stale = 0

    @property
    def active(self) -> bool:
        return self.patience is not None

    def update(self, mean_val_acc: float) -> tuple[bool, bool]:
        if not self.active:
            return False, False
        if mean_val_acc > self.best:
            self.best = mean_val_acc
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def run_fedavg(
    cfg: FederationConfig,
    datasets: Sequence[ClientDataset],
    on_round: OnRound | None = None,
) -> FedAvgResult:
    """T rounds of broadcast, local common-feature training, and averaging."""
    d_common, class_count = _check_datasets(cfg, datasets)
    theta = mlp_init(
        [d_common, *cfg.hidden_widths, class_count],
        np.random.default_rng(_seed_key(cfg.param_seed, 0)),
    )
    batch_rngs = [np.random.default_rng(_seed_key(cfg.batch_seed, k)) for k in range(cfg.clients)]
    train = [ds.rows(TRAIN) for ds in datasets]

    def evaluate(tag: int) -> list[float]:
        out = []
        for ds in datasets:
            xc, _, y = ds.rows(tag)
            logits, _ = mlp_forward(theta, xc)
            out.append(_accuracy_from_logits(logits, y))
        return out

    stopper = _EarlyStop(cfg.early_stop_patience)
    rounds_run = 0
    val_accs, test_accs = evaluate(VAL), evaluate(TEST)
    snapshot = None
    for t in range(cfg.rounds):
        locals_ = [
            client_local_fedavg(k, theta, train[k][0], train[k][2], class_count, cfg, batch_rngs[k])
            for k in range(cfg.clients)
        ]
        theta = aggregate(locals_)
        rounds_run = t + 1
        val_accs, test_accs = evaluate(VAL), evaluate(TEST)
        if on_round is not None:
            on_round(t, val_accs, test_accs)
        improved, stop = stopper.update(float(np.nanmean(val_accs)))
        if improved:
            snapshot = (theta.copy(), list(val_accs), list(test_accs))
        if stop:
            break
    if snapshot is not None:
        theta, val_accs, test_accs = snapshot
    return FedAvgResult(
        per_client_val_acc=val_accs,
        per_client_test_acc=test_accs,
        rounds_run=rounds_run,
        epochs_run=rounds_run * cfg.local_epochs,
        common=theta,
    )


def run_chfl(
    cfg: FederationConfig,
    datasets: Sequence[ClientDataset],
    on_round: OnRound | None = None,
) -> ChflResult:
    """Federated common column plus locally trained unique columns and laterals.

    Clients without unique features fall back to plain fedavg behaviour and
    are evaluated on the common column alone, so the degenerate all-common
    case reproduces run_fedavg exactly.
    """
    d_common, class_count = _check_datasets(cfg, datasets)
    c_dims = [d_common, *cfg.hidden_widths, class_count]
    theta = mlp_init(c_dims, np.random.default_rng(_seed_key(cfg.param_seed, 0)))
    batch_rngs = [np.random.default_rng(_seed_key(cfg.batch_seed, k)) for k in range(cfg.clients)]
    train = [ds.rows(TRAIN) for ds in datasets]

    uniques: list[MlpParams | None] = []
    laterals: list[LateralSet | None] = []
    adams: list[AdamState | None] = []
    for k, ds in enumerate(datasets):
        if ds.unique_dim == 0:
            uniques.append(None)
            laterals.append(None)
            adams.append(None)
            continue
        rng_u = np.random.default_rng(_seed_key(cfg.param_seed, 1, k))
        u_dims = [ds.unique_dim, *cfg.hidden_widths, class_count]
        unique = mlp_init(u_dims, rng_u)
        lateral = lateral_init(c_dims, u_dims, cfg.mu, rng_u)
        uniques.append(unique)
        laterals.append(lateral)
        adams.append(adam_init(unique.arrays() + list(lateral.matrices)))

    def evaluate(tag: int) -> list[float]:
        out = []
        for k, ds in enumerate(datasets):
            xc, xu, y = ds.rows(tag)
            if uniques[k] is None:
                logits, _ = mlp_forward(theta, xc)
                out.append(_accuracy_from_logits(logits, y))
            else:
                model = ChflClientModel(common=theta, unique=uniques[k], lateral=laterals[k])
                probs, _ = chfl_forward(model, xc, xu)
                out.append(_accuracy_from_logits(probs, y))
        return out

    stopper = _EarlyStop(cfg.early_stop_patience)
    rounds_run = 0
    val_accs, test_accs = evaluate(VAL), evaluate(TEST)
    snapshot = None
    for t in range(cfg.rounds):
        locals_ = []
        for k in range(cfg.clients):
            xc, xu, y = train[k]
            if uniques[k] is None:
                locals_.append(
                    client_local_fedavg(k, theta, xc, y, class_count, cfg, batch_rngs[k])
                )
            else:
                theta_k, uniques[k], laterals[k], adams[k] = client_local_chfl(
                    k, theta, uniques[k], laterals[k], xc, xu, y,
                    class_count, cfg, batch_rngs[k], adams[k],
                )
                locals_.append(theta_k)
        theta = aggregate(locals_)
        rounds_run = t + 1
        val_accs, test_accs = evaluate(VAL), evaluate(TEST)
        if on_round is not None:
            on_round(t, val_accs, test_accs)
        improved, stop = stopper.update(float(np.nanmean(val_accs)))
        if improved:
            snapshot = (
                theta.copy(),
                [None if u is None else u.copy() for u in uniques],
                [None if l is None else l.copy() for l in laterals],
                list(val_accs),
                list(test_accs),
            )
        if stop:
            break
    if snapshot is not None:
        theta, uniques, laterals, val_accs, test_accs = snapshot

    models = [
        None if uniques[k] is None
        else ChflClientModel(common=theta, unique=uniques[k], lateral=laterals[k])
        for k in range(cfg.clients)
    ]
    return ChflResult(
        per_client_val_acc=val_accs,
        per_client_test_acc=test_accs,
        rounds_run=rounds_run,
        epochs_run=rounds_run * cfg.local_epochs,
        common=theta,
        models=models,
    )


def run_local_baseline(
    cfg: FederationConfig,
    datasets: Sequence[ClientDataset],
    on_round: OnRound | None = None,
) -> LocalResult:
    """Each client trains alone on all of its features for the same T*E epoch
    budget as the federated methods (early stopping, when enabled, plateaus
    per client)."""
    _, class_count = _check_datasets(cfg, datasets)
    batch_rngs = [np.random.default_rng(_seed_key(cfg.batch_seed, k)) for k in range(cfg.clients)]
    nets: list[MlpParams] = []
    adams: list[AdamState] = []
    for k, ds in enumerate(datasets):
        dims = [ds.x_common.shape[1] + ds.unique_dim, *cfg.hidden_widths, class_count]
        nets.append(mlp_init(dims, np.random.default_rng(_seed_key(cfg.param_seed, 2, k))))
        adams.append(adam_init(nets[k].arrays()))
    full = []
    for ds in datasets:
        xc, xu, y = ds.rows(TRAIN)
        full.append((np.hstack([xc, xu]), y))

    def evaluate(tag: int) -> list[float]:
        out = []
        for k, ds in enumerate(datasets):
            xc, xu, y = ds.rows(tag)
            logits, _ = mlp_forward(nets[k], np.hstack([xc, xu]))
            out.append(_accuracy_from_logits(logits, y))
        return out

    stoppers = [_EarlyStop(cfg.early_stop_patience) for _ in range(cfg.clients)]
    active = [True] * cfg.clients
    epochs_run = [0] * cfg.clients
    snapshots: list[tuple | None] = [None] * cfg.clients
    rounds_run = 0
    val_accs, test_accs = evaluate(VAL), evaluate(TEST)
    for t in range(cfg.rounds):
        if not any(active):
            break
        for k in range(cfg.clients):
            if not active[k]:
                continue
            x, y = full[k]
            if y.shape[0] == 0:
                raise ConfigError(f"client {k} has no training rows")
            for _ in range(cfg.local_epochs):
                for idx in _batches(y.shape[0], cfg.batch_size, batch_rngs[k]):
                    nets[k], adams[k] = _common_step(
                        nets[k], adams[k], x[idx], y[idx], class_count, cfg.learning_rate
                    )
                epochs_run[k] += 1
        rounds_run = t + 1
        val_accs, test_accs = evaluate(VAL), evaluate(TEST)
        if on_round is not None:
            on_round(t, val_accs, test_accs)
        for k in range(cfg.clients):
            if not active[k]:
                continue
            improved, stop = stoppers[k].update(val_accs[k])
            if improved:
                snapshots[k] = (nets[k].copy(), val_accs[k], test_accs[k])
            if stop:
                active[k] = False
    for k in range(cfg.clients):
        if snapshots[k] is not None:
            nets[k], val_accs[k], test_accs[k] = snapshots[k]
    return LocalResult(
        per_client_val_acc=val_accs,
        per_client_test_acc=test_accs,
        rounds_run=rounds_run,
        epochs_run=max(epochs_run) if epochs_run else 0,
        models=nets,
    )


def run_concat_baseline(
    cfg: FederationConfig,
    datasets: Sequence[ClientDataset],
    on_round: OnRound | None = None,
) -> ConcatResult:
    """Fedavg trains the common net; in parallel each client trains a net on
    concat(unique features, common-net raw logits). Inference feeds the
    final global common net's logits into the client net."""
    d_common, class_count = _check_datasets(cfg, datasets)
    theta = mlp_init(
        [d_common, *cfg.hidden_widths, class_count],
        np.random.default_rng(_seed_key(cfg.param_seed, 0)),
    )
    batch_rngs = [np.random.default_rng(_seed_key(cfg.batch_seed, k)) for k in range(cfg.clients)]
    train = [ds.rows(TRAIN) for ds in datasets]
    nets: list[MlpParams] = []
    adams: list[AdamState] = []
    for k, ds in enumerate(datasets):
        dims = [ds.unique_dim + class_count, *cfg.hidden_widths, class_count]
        nets.append(mlp_init(dims, np.random.default_rng(_seed_key(cfg.param_seed, 3, k))))
        adams.append(adam_init(nets[k].arrays()))

    def evaluate(tag: int) -> list[float]:
        out = []
        for k, ds in enumerate(datasets):
            xc, xu, y = ds.rows(tag)
            logits_c, _ = mlp_forward(theta, xc)
            logits, _ = mlp_forward(nets[k], np.hstack([xu, logits_c]))
            out.append(_accuracy_from_logits(logits, y))
        return out

    stopper = _EarlyStop(cfg.early_stop_patience)
    rounds_run = 0
    val_accs, test_accs = evaluate(VAL), evaluate(TEST)
    snapshot = None
    for t in range(cfg.rounds):
        locals_ = []
        for k in range(cfg.clients):
            xc_all, xu_all, y_all = train[k]
            n = y_all.shape[0]
            if n == 0:
                raise ConfigError(f"client {k} has no training rows")
            params_c = theta.copy()
            if cfg.self_check and not _params_equal(params_c, theta):
                raise StateError(f"client {k} broadcast copy differs from the server parameters")
            adam_c = adam_init(params_c.arrays())
            for _ in range(cfg.local_epochs):
                for idx in _batches(n, cfg.batch_size, batch_rngs[k]):
                    xb_c, xb_u, yb = xc_all[idx], xu_all[idx], y_all[idx]
                    params_c, adam_c = _common_step(
                        params_c, adam_c, xb_c, yb, class_count, cfg.learning_rate
                    )
                    logits_c, _ = mlp_forward(params_c, xb_c)
                    nets[k], adams[k] = _common_step(
                        nets[k], adams[k], np.hstack([xb_u, logits_c]), yb,
                        class_count, cfg.learning_rate,
                    )
            locals_.append(params_c)
        theta = aggregate(locals_)
        rounds_run = t + 1
        val_accs, test_accs = evaluate(VAL), evaluate(TEST)
        if on_round is not None:
            on_round(t, val_accs, test_accs)
        improved, stop = stopper.update(float(np.nanmean(val_accs)))
        if improved:
            snapshot = (theta.copy(), [n.copy() for n in nets], list(val_accs), list(test_accs))
        if stop:
            break
    if snapshot is not None:
        theta, nets, val_accs, test_accs = snapshot
    return ConcatResult(
        per_client_val_acc=val_accs,
        per_client_test_acc=test_accs,
        rounds_run=rounds_run,
        epochs_run=rounds_run * cfg.local_epochs,
        common=theta,
        unique_nets=nets,
    )


def run_method(
    cfg: FederationConfig,
    datasets: Sequence[ClientDataset],
    on_round: OnRound | None = None,
) -> RunResult:
    """Dispatch on cfg.method; chfl_mu0 forces mu to 0."""
    method = Method(cfg.method)
    if method is Method.COMMON:
        return run_fedavg(cfg, datasets, on_round)
    if method is Method.LOCAL:
        return run_local_baseline(cfg, datasets, on_round)
    if method is Method.CHFL_MU0:
        return run_chfl(replace(cfg, mu=0.0), datasets, on_round)
    if method is Method.CHFL:
        return run_chfl(cfg, datasets, on_round)
    if method is Method.CONCAT:
        return run_concat_baseline(cfg, datasets, on_round)
    raise ConfigError(f"unknown method {cfg.method!r}")
