"""Dataset ingestion, splitting, and feature partitioning.

All operations are pure functions of (inputs, seed). Rows keep their file
order after loading; partition tags and feature plans are what introduce
randomness, each from an explicit generator.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, CsvParseError, ShapeError

TRAIN, VAL, TEST = 0, 1, 2
PARTITION_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


@dataclass
class RawDataset:
    """Dense feature matrix with integer class labels in [0, class_count)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    feature_names: list[str]
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("labels must be a vector with one entry per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError("labels fall outside [0, class_count)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


@dataclass
class FeatureSplitPlan:
    """Disjoint column groups: one shared group plus one unique group per client."""

    common_indices: np.ndarray
    unique_indices_per_client: list[np.ndarray]

    def __post_init__(self):
        groups = [self.common_indices, *self.unique_indices_per_client]
        seen: set[int] = set()
        for g in groups:
            for idx in np.asarray(g).tolist():
                if idx in seen:
                    raise ConfigError(f"feature index {idx} appears in more than one group")
                seen.add(idx)
        if len(self.common_indices) == 0:
            raise ConfigError("common feature group must be nonempty")

    @property
    def client_count(self) -> int:
        return len(self.unique_indices_per_client)


@dataclass
class ClientDataset:
    """One client's view: shared-feature block, unique-feature block, labels,
    and a per-row partition tag (train/val/test)."""

    x_common: np.ndarray
    x_unique: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    class_count: int

    def __post_init__(self):
        n = self.x_common.shape[0]
        if self.x_unique.shape[0] != n or self.labels.shape[0] != n or self.partition.shape[0] != n:
            raise ShapeError("client arrays must agree on the row count")

    @property
    def unique_dim(self) -> int:
        return self.x_unique.shape[1]

    def rows(self, tag: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x_common, x_unique, labels) restricted to one partition tag."""
        mask = self.partition == tag
        return self.x_common[mask], self.x_unique[mask], self.labels[mask]


@dataclass
class Standardizer:
    """Affine per-feature transform fit on training rows only."""

    mean: np.ndarray
    scale: np.ndarray  # 1/std where std > 0, else 0 (constant features map to 0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) * self.scale


def load_csv(path, label_column, has_header: bool = True, name: str | None = None) -> RawDataset:
    """Load a numeric CSV into a RawDataset.

    `label_column` selects by header name (requires has_header) or 0-based
    column index. Distinct label values are mapped, in sorted order, to
    0..C-1. Non-numeric cells raise CsvParseError with the offending
    row/column; missing values are rejected rather than imputed.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r]
    if not rows:
        raise CsvParseError(f"{path}: empty file")
    if has_header:
        header, rows = rows[0], rows[1:]
    else:
        header = [f"f{i}" for i in range(len(rows[0]))]
    if isinstance(label_column, str):
        if not has_header:
            raise ConfigError("label column by name requires a header row")
        try:
            label_idx = header.index(label_column)
        except ValueError:
            raise ConfigError(f"unknown label column {label_column!r}") from None
    else:
        label_idx = int(label_column)
        if not 0 <= label_idx < len(header):
            raise ConfigError(f"label column index {label_idx} out of range")
    if not rows:
        raise CsvParseError(f"{path}: no data rows")

    width = len(header)
    features = np.empty((len(rows), width - 1), dtype=np.float64)
    raw_labels = np.empty(len(rows), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise CsvParseError(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        col_out = 0
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                raise CsvParseError(f"{path}: missing value at row {i + 1}, column {j + 1}")
            try:
                value = float(cell)
            except ValueError:
                raise CsvParseError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 1}, column {j + 1}"
                ) from None
            if j == label_idx:
                raw_labels[i] = value
            else:
                features[i, col_out] = value
                col_out += 1
    classes = np.unique(raw_labels)
    label_map = {v: i for i, v in enumerate(classes.tolist())}
    labels = np.array([label_map[v] for v in raw_labels.tolist()], dtype=np.int64)
    feature_names = [h for j, h in enumerate(header) if j != label_idx]
    return RawDataset(
        features=features,
        labels=labels,
        class_count=len(classes),
        feature_names=feature_names,
        name=name or path.stem,
    )


def load_manifest(path) -> RawDataset:
    """Load a dataset described by a small JSON manifest.

    Keys: path (csv, relative to the manifest), label_column, has_header
    (default true), optional name and class_count override.
    """
    manifest_path = Path(path)
    spec = json.loads(manifest_path.read_text())
    csv_path = Path(spec["path"])
    if not csv_path.is_absolute():
        csv_path = manifest_path.parent / csv_path
    ds = load_csv(
        csv_path,
        spec["label_column"],
        has_header=spec.get("has_header", True),
        name=spec.get("name"),
    )
    if "class_count" in spec and spec["class_count"] != ds.class_count:
        raise ConfigError(
            f"manifest declares {spec['class_count']} classes but file has {ds.class_count}"
        )
    return ds


def standardize(train_rows: np.ndarray) -> Standardizer:
    """Fit mean/std on training rows; zero-variance features map to 0."""
    x = np.asarray(train_rows, dtype=np.float64)
    if x.shape[0] == 0:
        raise ConfigError("training partition is empty")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    scale = np.where(std > 0.0, 1.0 / np.where(std > 0.0, std, 1.0), 0.0)
    return Standardizer(mean=mean, scale=scale)


def split_train_val_test(
    n: int, fractions: Sequence[float], rng: np.random.Generator
) -> np.ndarray:
    """Random partition tags (TRAIN/VAL/TEST) with floor-then-distribute sizes.

    Each partition gets floor(n * fraction) rows; leftover rows go to the
    partitions with the largest fractional remainders (ties broken by
    partition order).
    """
    fractions = list(fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    if n < 3:
        raise ConfigError(f"need at least 3 rows to split, got {n}")
    exact = [n * f for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n - sum(counts)):
        best = max(range(3), key=lambda i: (remainders[i], -i))
        counts[best] += 1
        remainders[best] = -1.0
    tags = np.empty(n, dtype=np.int8)
    perm = rng.permutation(n)
    start = 0
    for tag, count in zip((TRAIN, VAL, TEST), counts):
        tags[perm[start : start + count]] = tag
        start += count
    return tags


def make_feature_split(
    d: int, common_ratio: float, k: int, rng: np.random.Generator
) -> FeatureSplitPlan:
    """Random feature plan: round(common_ratio * d) shared columns, the rest
    dealt round-robin to k clients (group sizes differ by at most 1).

    The common count is clamped so that the shared group is nonempty and every
    client keeps at least one unique feature.
    """
    if not 0.0 < common_ratio < 1.0:
        raise ConfigError(f"common_ratio must lie in (0, 1), got {common_ratio}")
    if k < 1:
        raise ConfigError(f"need at least one client, got {k}")
    if d < k + 1:
        raise ConfigError(f"{d} features cannot give {k} clients a unique feature each")
    n_common = int(np.floor(common_ratio * d + 0.5))  # round half up
    n_common = min(max(n_common, 1), d - k)
    perm = rng.permutation(d)
    common = np.sort(perm[:n_common])
    rest = perm[n_common:]
    uniques = [np.sort(rest[j::k]) for j in range(k)]
    return FeatureSplitPlan(common_indices=common, unique_indices_per_client=uniques)


def partition_samples(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint random row groups covering [0, n), sizes differing by at most 1."""
    if n < k:
        raise ConfigError(f"cannot spread {n} rows over {k} clients")
    perm = rng.permutation(n)
    base, extra = divmod(n, k)
    out = []
    start = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        out.append(np.sort(perm[start : start + size]))
        start += size
    return out


def correlation_score(features: np.ndarray, plan: FeatureSplitPlan) -> float:
    """Sum of |Pearson correlation| over every (shared column, other column) pair.

    `features` should be the training rows. Columns outside the shared group
    (whether assigned to a client or not) count as "other". Zero-variance
    columns contribute 0.
    """
    x = np.asarray(features, dtype=np.float64)
    common = np.asarray(plan.common_indices)
    rest = np.setdiff1d(np.arange(x.shape[1]), common)
    if rest.size == 0:
        return 0.0
    abs_corr = _abs_correlation_matrix(x)
    return float(abs_corr[np.ix_(common, rest)].sum())


def _abs_correlation_matrix(x: np.ndarray) -> np.ndarray:
    """|Pearson| matrix with zero-variance columns zeroed out."""
    centered = x - x.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = centered / safe
    corr = np.abs(unit.T @ unit)
    corr[norms == 0.0, :] = 0.0
    corr[:, norms == 0.0] = 0.0
    np.clip(corr, 0.0, 1.0, out=corr)
    return corr


@dataclass
class SplitSelection:
    """The argmax/median/argmin plans from a sampled candidate pool."""

    max_plan: FeatureSplitPlan
    max_score: float
    median_plan: FeatureSplitPlan
    median_score: float
    min_plan: FeatureSplitPlan
    min_score: float


def select_split_by_correlation(
    features: np.ndarray,
    k: int,
    common_ratio: float,
    n_candidates: int,
    rng: np.random.Generator,
) -> SplitSelection:
    """Score n_candidates random feature plans and pick extremes plus median.

    Exhausting every possible plan is intractable, so a seeded random sample
    stands in for the full enumeration. The median is the plan at sorted
    index (n_candidates - 1) // 2.
    """
    if n_candidates < 3:
        raise ConfigError(f"need at least 3 candidates, got {n_candidates}")
    x = np.asarray(features, dtype=np.float64)
    abs_corr = _abs_correlation_matrix(x)
    all_cols = np.arange(x.shape[1])
    plans = []
    scores = np.empty(n_candidates, dtype=np.float64)
    for i in range(n_candidates):
        plan = make_feature_split(x.shape[1], common_ratio, k, rng)
        rest = np.setdiff1d(all_cols, plan.common_indices)
        scores[i] = abs_corr[np.ix_(plan.common_indices, rest)].sum()
        plans.append(plan)
    order = np.argsort(scores, kind="stable")
    i_min, i_med, i_max = order[0], order[(n_candidates - 1) // 2], order[-1]
    return SplitSelection(
        max_plan=plans[i_max],
        max_score=float(scores[i_max]),
        median_plan=plans[i_med],
        median_score=float(scores[i_med]),
        min_plan=plans[i_min],
        min_score=float(scores[i_min]),
    )


def gen_synthetic(
    n: int,
    d: int,
    class_count: int,
    common_signal: float,
    unique_signal: float,
    noise: float,
    rng: np.random.Generator,
    k: int = 5,
    common_ratio: float = 0.3,
    feature_correlation: float = 0.0,
) -> tuple[RawDataset, FeatureSplitPlan]:
    """Synthetic classification data where both feature groups carry label signal.

    Class logits are a sum of one linear term over the shared columns (scaled
    to variance common_signal^2), one per-client linear term over each unique
    group (variance unique_signal^2 each), and iid N(0, noise^2) noise; labels
    are drawn from the softmax of those logits. Returns the dataset plus the
    generating feature plan.

    Shared columns are standard normal. With feature_correlation = 0 the
    unique columns are too (independent of everything). A positive value rho
    mixes each unique column as rho * g(shared columns) + sqrt(1-rho^2) *
    idiosyncratic noise, with g a fixed random tanh feature, so unique and
    shared columns are statistically tied the way correlated tabular features
    are; the label rule above is unchanged.
    """
    if common_signal < 0 or unique_signal < 0 or noise < 0:
        raise ConfigError("signal and noise weights must be nonnegative")
    if not 0.0 <= feature_correlation < 1.0:
        raise ConfigError("feature_correlation must lie in [0, 1)")
    plan = make_feature_split(d, common_ratio, k, rng)
    x = np.empty((n, d))
    common_cols = np.asarray(plan.common_indices)
    x[:, common_cols] = rng.standard_normal((n, common_cols.size))
    rho = feature_correlation
    for cols in plan.unique_indices_per_client:
        cols = np.asarray(cols)
        idio = rng.standard_normal((n, cols.size))
        if rho == 0.0:
            x[:, cols] = idio
        else:
            # Two-layer random feature map: rich enough that the tie between
            # the groups is not recoverable from a handful of rows.
            hidden = max(2 * common_cols.size, 16)
            w1 = rng.standard_normal((common_cols.size, hidden)) / np.sqrt(common_cols.size)
            w2 = rng.standard_normal((hidden, cols.size)) / np.sqrt(hidden)
            shared = np.tanh(2.0 * (np.maximum(x[:, common_cols] @ w1, 0.0) @ w2))
            shared = (shared - shared.mean(axis=0)) / shared.std(axis=0)
            x[:, cols] = rho * shared + np.sqrt(1.0 - rho * rho) * idio
    logits = np.zeros((n, class_count))

    def add_group(cols: np.ndarray, weight: float) -> None:
        if weight == 0.0 or cols.size == 0:
            return
        coef = rng.standard_normal((cols.size, class_count)) / np.sqrt(cols.size)
        logits[...] += weight * (x[:, cols] @ coef)

    add_group(common_cols, common_signal)
    for cols in plan.unique_indices_per_client:
        add_group(np.asarray(cols), unique_signal)
    if noise > 0.0:
        logits += noise * rng.standard_normal(logits.shape)

    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    draws = rng.random((n, 1))
    labels = (draws > np.cumsum(probs, axis=1)).sum(axis=1).astype(np.int64)
    ds = RawDataset(
        features=x,
        labels=labels,
        class_count=class_count,
        feature_names=[f"f{i}" for i in range(d)],
        name="synthetic",
    )
    return ds, plan


def plan_to_json(plan: FeatureSplitPlan, **meta) -> str:
    """Serialize a plan (plus optional metadata such as the seed) to JSON text."""
    doc = {
        "common_indices": np.asarray(plan.common_indices).tolist(),
        "unique_indices_per_client": [np.asarray(g).tolist() for g in plan.unique_indices_per_client],
    }
    doc.update(meta)
    return json.dumps(doc, sort_keys=True)


def plan_from_json(text: str) -> FeatureSplitPlan:
    doc = json.loads(text)
    return FeatureSplitPlan(
        common_indices=np.asarray(doc["common_indices"], dtype=np.int64),
        unique_indices_per_client=[
            np.asarray(g, dtype=np.int64) for g in doc["unique_indices_per_client"]
        ],
    )


def build_client_datasets(
    dataset: RawDataset,
    plan: FeatureSplitPlan,
    rng: np.random.Generator,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> list[ClientDataset]:
    """Full preparation pipeline for one run.

    Tags rows train/val/test, standardizes with train-row statistics, then
    deals every partition's rows evenly (and disjointly) to the plan's
    clients. Each client sees the shared columns plus its own unique columns.
    """
    tags = split_train_val_test(dataset.n, fractions, rng)
    scaler = standardize(dataset.features[tags == TRAIN])
    x = scaler.apply(dataset.features)
    k = plan.client_count
    client_rows: list[list[np.ndarray]] = [[] for _ in range(k)]
    for tag in (TRAIN, VAL, TEST):
        tag_rows = np.flatnonzero(tags == tag)
        for j, part in enumerate(partition_samples(tag_rows.size, k, rng)):
            client_rows[j].append(tag_rows[part])
    clients = []
    for j in range(k):
        rows = np.concatenate(client_rows[j])
        rows.sort()
        clients.append(
            ClientDataset(
                x_common=x[np.ix_(rows, np.asarray(plan.common_indices))],
                x_unique=x[np.ix_(rows, np.asarray(plan.unique_indices_per_client[j]))],
                labels=dataset.labels[rows],
                partition=tags[rows],
                class_count=dataset.class_count,
            )
        )
    return clients
