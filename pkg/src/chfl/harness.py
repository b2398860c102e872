"""Experiment orchestration: seeds, repetitions, mu tuning, sweeps, reports.

One experiment = n_feature_splits feature plans x n_repeats seeded runs, with
every requested method consuming identical client datasets and identical
initial common-column parameters within a (split, seed) cell. Metrics stream
as line-delimited JSON records; summaries land in a CSV. All randomness is
derived from the experiment's single top-level seed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as data_mod
from .columns import save_model
from .data import ClientDataset, FeatureSplitPlan, RawDataset, build_client_datasets
from .errors import ConfigError
from .federation import (
    FederationConfig,
    Method,
    METHOD_ORDER,
    RunResult,
    run_chfl,
    run_concat_baseline,
    run_fedavg,
    run_local_baseline,
)

DEFAULT_MU_GRID = (0.0, 0.1, 0.3, 0.5, 1.0)


@dataclass
class ExperimentSpec:
    """Declarative description of one experiment (see load_spec for the file form)."""

    dataset: dict
    methods: list[str]
    federation: FederationConfig
    common_ratio: float = 0.3
    n_feature_splits: int = 3
    n_repeats: int = 5
    mu_grid: tuple[float, ...] = DEFAULT_MU_GRID
    mu_policy: str = "per_client"
    seed: int = 0
    output: str | None = None
    save_models: bool = False
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.n_feature_splits < 1 or self.n_repeats < 1:
            raise ConfigError("n_feature_splits and n_repeats must be >= 1")
        if any(not 0.0 <= m <= 1.0 for m in self.mu_grid):
            raise ConfigError(f"mu_grid values must lie in [0, 1], got {self.mu_grid}")
        if self.mu_policy not in ("per_client", "global"):
            raise ConfigError(f"mu_policy must be per_client or global, got {self.mu_policy}")
        for m in self.methods:
            Method(m)


@dataclass
class MetricsRecord:
    """Final metrics of one (method, split, seed) run.

    `mu` is the fixed coupling for single-mu runs or the per-client tuned
    values for the validation-tuned method; `seed` is the repeat index (all
    RNG streams derive from it plus the experiment seed).
    """

    method: str
    dataset: str
    split_id: int
    seed: int
    common_ratio: float
    clients: int
    mu: float | list[float] | None
    per_client_val_acc: list[float]
    per_client_test_acc: list[float]
    mean_test_acc: float


@dataclass
class MethodSummary:
    dataset: str
    method: str
    common_ratio: float
    clients: int
    mean_test_acc: float
    std_over_runs: float
    std_over_split_means: float
    n_runs: int


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    summaries: list[MethodSummary]
    round_lines: list[dict]
    skipped: list[dict] = field(default_factory=list)


def load_spec(path) -> ExperimentSpec:
    """Parse an experiment spec file (JSON object, keys as in ExperimentSpec)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    fed = doc.get("federation", {})
    if "hidden_widths" in fed:
        fed["hidden_widths"] = tuple(fed["hidden_widths"])
    return ExperimentSpec(
        dataset=doc["dataset"],
        methods=list(doc["methods"]),
        federation=FederationConfig(**fed),
        common_ratio=doc.get("common_ratio", 0.3),
        n_feature_splits=doc.get("n_feature_splits", 3),
        n_repeats=doc.get("n_repeats", 5),
        mu_grid=tuple(doc.get("mu_grid", DEFAULT_MU_GRID)),
        mu_policy=doc.get("mu_policy", "per_client"),
        seed=doc.get("seed", 0),
        output=doc.get("output"),
        save_models=doc.get("save_models", False),
        base_dir=path.parent,
    )


def load_dataset_ref(ref: dict, base_dir: Path, seed: int, split_id: int,
                     clients: int, common_ratio: float) -> tuple[RawDataset, FeatureSplitPlan]:
    """Materialize (dataset, feature plan) for one feature-split index.

    File-backed datasets keep one matrix and draw a fresh random plan per
    split index; synthetic datasets are regenerated per split index and use
    their generating plan, so the client/unique-group structure stays aligned
    with the label signal.
    """
    kind = ref.get("kind", "csv")
    if kind == "synthetic":
        ds, plan = data_mod.gen_synthetic(
            n=ref["n"],
            d=ref["d"],
            class_count=ref["classes"],
            common_signal=ref.get("common_signal", 1.0),
            unique_signal=ref.get("unique_signal", 1.0),
            noise=ref.get("noise", 0.0),
            rng=np.random.default_rng([seed, 10, split_id, ref.get("seed", 0)]),
            k=clients,
            common_ratio=common_ratio,
            feature_correlation=ref.get("feature_correlation", 0.0),
        )
        return ds, plan
    if kind == "manifest":
        ds = data_mod.load_manifest(_resolve(ref["path"], base_dir))
    elif kind == "csv":
        ds = data_mod.load_csv(
            _resolve(ref["path"], base_dir),
            ref["label_column"],
            has_header=ref.get("has_header", True),
            name=ref.get("name"),
        )
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if "subsample" in ref:
        n_keep = int(ref["subsample"])
        if n_keep < ds.n:
            rows = np.sort(
                np.random.default_rng([seed, 11, ref.get("subsample_seed", 0)]).choice(
                    ds.n, size=n_keep, replace=False
                )
            )
            ds = RawDataset(
                features=ds.features[rows],
                labels=ds.labels[rows],
                class_count=ds.class_count,
                feature_names=ds.feature_names,
                name=ds.name,
            )
    plan = data_mod.make_feature_split(
        ds.d, common_ratio, clients, np.random.default_rng([seed, 12, split_id])
    )
    return ds, plan


def _resolve(path, base_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base_dir) / p


def prepare_clients(
    spec: ExperimentSpec, split_id: int, repeat: int
) -> tuple[str, list[ClientDataset], FederationConfig]:
    """Deterministic (dataset name, client datasets, run config) for one cell.

    Methods never see the cell index differently, which is what makes the
    comparison paired: identical rows, identical standardization, identical
    parameter and batch seeds.
    """
    k = spec.federation.clients
    ds, plan = load_dataset_ref(
        spec.dataset, spec.base_dir, spec.seed, split_id, k, spec.common_ratio
    )
    clients = build_client_datasets(
        ds, plan, np.random.default_rng([spec.seed, 20, split_id, repeat])
    )
    cfg = replace(
        spec.federation,
        mu=spec.federation.mu,
        param_seed=(spec.seed, 30, split_id, repeat),
        batch_seed=(spec.seed, 40, split_id, repeat),
    )
    return ds.name, clients, cfg


@dataclass
class TuneResult:
    chosen_mu: list[float]
    per_client_val_acc: list[float]
    per_client_test_acc: list[float]
    runs: dict[float, RunResult]


def tune_mu(
    cfg: FederationConfig,
    clients: Sequence[ClientDataset],
    candidate_mus: Sequence[float],
    policy: str = "per_client",
    on_round_for=None,
) -> TuneResult:
    """Train once per candidate mu and pick the best by validation accuracy.

    per_client policy: each client keeps the candidate with its own highest
    validation accuracy (ties go to the smaller mu); consistent because the
    common column's trajectory does not depend on mu. global policy: one mu
    maximizing the mean validation accuracy.
    """
    if not candidate_mus:
        raise ConfigError("candidate mu list must be nonempty")
    candidates = sorted(set(float(m) for m in candidate_mus))
    runs: dict[float, RunResult] = {}
    for m in candidates:
        cb = on_round_for(m) if on_round_for is not None else None
        runs[m] = run_chfl(replace(cfg, mu=m), clients, on_round=cb)
    k = len(clients)
    if policy == "global":
        best = max(candidates, key=lambda m: (runs[m].mean_val_acc, -m))
        chosen = [best] * k
    else:
        chosen = []
        for i in range(k):
            best, best_val = candidates[0], runs[candidates[0]].per_client_val_acc[i]
            for m in candidates[1:]:
                val = runs[m].per_client_val_acc[i]
                if val > best_val:
                    best, best_val = m, val
            chosen.append(best)
    val = [runs[chosen[i]].per_client_val_acc[i] for i in range(k)]
    test = [runs[chosen[i]].per_client_test_acc[i] for i in range(k)]
    return TuneResult(chosen_mu=chosen, per_client_val_acc=val, per_client_test_acc=test, runs=runs)


class _Recorder:
    """Collects per-round and final lines with a stable, JSON-safe schema."""

    def __init__(self, dataset: str, split_id: int, repeat: int, ratio: float, clients: int):
        self.ctx = {
            "dataset": dataset,
            "split_id": split_id,
            "seed": repeat,
            "common_ratio": ratio,
            "clients": clients,
        }
        self.lines: list[dict] = []

    def on_round_cb(self, method: str, mu):
        def cb(round_index: int, val_accs: list[float], test_accs: list[float]) -> None:
            self.lines.append(
                {
                    **self.ctx,
                    "method": method,
                    "mu": mu,
                    "round": round_index,
                    "final": False,
                    "per_client_val_acc": [float(a) for a in val_accs],
                    "per_client_test_acc": [float(a) for a in test_accs],
                    "mean_test_acc": float(np.nanmean(test_accs)),
                }
            )

        return cb

    def final(self, method: str, mu, rounds_run: int,
              val_accs: Sequence[float], test_accs: Sequence[float]) -> dict:
        line = {
            **self.ctx,
            "method": method,
            "mu": mu,
            "round": rounds_run - 1,
            "final": True,
            "per_client_val_acc": [float(a) for a in val_accs],
            "per_client_test_acc": [float(a) for a in test_accs],
            "mean_test_acc": float(np.nanmean(test_accs)),
        }
        self.lines.append(line)
        return line


def _run_one_method(
    method: Method,
    spec: ExperimentSpec,
    cfg: FederationConfig,
    clients: list[ClientDataset],
    rec: _Recorder,
) -> tuple[MetricsRecord, list]:
    """Run one method in one cell; returns its final record and any models."""
    name = method.value
    models = []
    if method is Method.COMMON:
        res = run_fedavg(cfg, clients, rec.on_round_cb(name, None))
        mu = None
    elif method is Method.LOCAL:
        res = run_local_baseline(cfg, clients, rec.on_round_cb(name, None))
        mu = None
    elif method is Method.CHFL_MU0:
        res = run_chfl(replace(cfg, mu=0.0), clients, rec.on_round_cb(name, 0.0))
        mu = 0.0
        models = res.models
    elif method is Method.CONCAT:
        res = run_concat_baseline(cfg, clients, rec.on_round_cb(name, None))
        mu = None
    else:  # validation-tuned chfl
        positive = [m for m in spec.mu_grid if m > 0.0]
        if not positive:
            raise ConfigError("mu_grid has no positive entries for the tuned method")
        tuned = tune_mu(
            cfg, clients, positive, spec.mu_policy,
            on_round_for=lambda m: rec.on_round_cb(name, m),
        )
        mu = [float(m) for m in tuned.chosen_mu]
        rounds_run = max(r.rounds_run for r in tuned.runs.values())
        line = rec.final(name, mu, rounds_run, tuned.per_client_val_acc, tuned.per_client_test_acc)
        record = MetricsRecord(
            method=name, dataset=rec.ctx["dataset"], split_id=rec.ctx["split_id"],
            seed=rec.ctx["seed"], common_ratio=rec.ctx["common_ratio"],
            clients=rec.ctx["clients"], mu=mu,
            per_client_val_acc=line["per_client_val_acc"],
            per_client_test_acc=line["per_client_test_acc"],
            mean_test_acc=line["mean_test_acc"],
        )
        best_run = tuned.runs[max(set(tuned.chosen_mu), key=tuned.chosen_mu.count)]
        models = getattr(best_run, "models", [])
        return record, models

    line = rec.final(name, mu, res.rounds_run, res.per_client_val_acc, res.per_client_test_acc)
    record = MetricsRecord(
        method=name, dataset=rec.ctx["dataset"], split_id=rec.ctx["split_id"],
        seed=rec.ctx["seed"], common_ratio=rec.ctx["common_ratio"],
        clients=rec.ctx["clients"], mu=mu,
        per_client_val_acc=line["per_client_val_acc"],
        per_client_test_acc=line["per_client_test_acc"],
        mean_test_acc=line["mean_test_acc"],
    )
    return record, models


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Full protocol: every method on every (feature split, repeat) cell."""
    records: list[MetricsRecord] = []
    round_lines: list[dict] = []
    out_dir = Path(spec.output) if spec.output else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for split_id in range(spec.n_feature_splits):
        for repeat in range(spec.n_repeats):
            ds_name, clients, cfg = prepare_clients(spec, split_id, repeat)
            rec = _Recorder(ds_name, split_id, repeat, spec.common_ratio, cfg.clients)
            for m in spec.methods:
                record, models = _run_one_method(Method(m), spec, cfg, clients, rec)
                records.append(record)
                if spec.save_models and out_dir is not None and models:
                    model_dir = out_dir / "models"
                    model_dir.mkdir(exist_ok=True)
                    for k, model in enumerate(models):
                        if model is not None:
                            save_model(
                                model_dir / f"{m}_split{split_id}_seed{repeat}_client{k}.npz",
                                model,
                            )
            round_lines.extend(rec.lines)
    summaries = summarize(records)
    if out_dir is not None:
        write_jsonl(out_dir / "metrics.jsonl", round_lines)
        write_summary_csv(out_dir / "summary.csv", summaries)
    return ExperimentResult(records=records, summaries=summaries, round_lines=round_lines)


def summarize(records: Sequence[MetricsRecord]) -> list[MethodSummary]:
    """Mean / std per (dataset, method, ratio, clients) group.

    std_over_runs treats all split x repeat runs as one sample; the
    std_over_split_means convention first averages each split's repeats.
    Both are sample standard deviations (ddof=1); 0 when only one value.
    """
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.dataset, r.method, r.common_ratio, r.clients), []).append(r)

    def method_rank(name: str) -> int:
        return METHOD_ORDER.index(Method(name))

    out = []
    for key in sorted(groups, key=lambda k: (k[0], method_rank(k[1]), k[2], k[3])):
        rs = groups[key]
        accs = np.array([r.mean_test_acc for r in rs])
        split_means = [
            np.mean([r.mean_test_acc for r in rs if r.split_id == s])
            for s in sorted({r.split_id for r in rs})
        ]
        out.append(
            MethodSummary(
                dataset=key[0],
                method=key[1],
                common_ratio=key[2],
                clients=key[3],
                mean_test_acc=float(accs.mean()),
                std_over_runs=float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
                std_over_split_means=(
                    float(np.std(split_means, ddof=1)) if len(split_means) > 1 else 0.0
                ),
                n_runs=len(rs),
            )
        )
    return out


def sweep_ratio(spec: ExperimentSpec, ratios: Sequence[float]) -> ExperimentResult:
    """Full protocol per common-feature ratio; infeasible ratios are skipped
    with a warning entry instead of aborting the sweep."""
    records: list[MetricsRecord] = []
    round_lines: list[dict] = []
    skipped: list[dict] = []
    for ratio in ratios:
        sub = replace(
            spec, common_ratio=float(ratio),
            output=str(Path(spec.output) / f"ratio_{ratio:g}") if spec.output else None,
        )
        try:
            res = run_experiment(sub)
        except ConfigError as exc:
            skipped.append({"common_ratio": float(ratio), "reason": str(exc)})
            continue
        records.extend(res.records)
        round_lines.extend(res.round_lines)
    summaries = summarize(records)
    if spec.output:
        out_dir = Path(spec.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out_dir / "summary.csv", summaries)
    return ExperimentResult(records=records, summaries=summaries,
                            round_lines=round_lines, skipped=skipped)


def sweep_clients(spec: ExperimentSpec, counts: Sequence[int]) -> ExperimentResult:
    """Full protocol per client count, common ratio held at spec.common_ratio."""
    records: list[MetricsRecord] = []
    round_lines: list[dict] = []
    skipped: list[dict] = []
    for k in counts:
        sub = replace(
            spec, federation=replace(spec.federation, clients=int(k)),
            output=str(Path(spec.output) / f"clients_{k}") if spec.output else None,
        )
        try:
            res = run_experiment(sub)
        except ConfigError as exc:
            skipped.append({"clients": int(k), "reason": str(exc)})
            continue
        records.extend(res.records)
        round_lines.extend(res.round_lines)
    summaries = summarize(records)
    if spec.output:
        out_dir = Path(spec.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_summary_csv(out_dir / "summary.csv", summaries)
    return ExperimentResult(records=records, summaries=summaries,
                            round_lines=round_lines, skipped=skipped)


def write_jsonl(path, lines: Sequence[dict]) -> None:
    with Path(path).open("w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


SUMMARY_COLUMNS = [
    "dataset", "method", "common_ratio", "clients",
    "mean_test_acc", "std_over_runs", "std_over_split_means", "n_runs",
]


def summary_csv_text(summaries: Sequence[MethodSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        writer.writerow([
            s.dataset, s.method, repr(s.common_ratio), s.clients,
            repr(s.mean_test_acc), repr(s.std_over_runs),
            repr(s.std_over_split_means), s.n_runs,
        ])
    return buf.getvalue()


def write_summary_csv(path, summaries: Sequence[MethodSummary]) -> None:
    Path(path).write_text(summary_csv_text(summaries))


def records_from_round_lines(lines: Sequence[dict]) -> list[MetricsRecord]:
    """Rebuild final MetricsRecords from a metrics.jsonl stream."""
    out = []
    for line in lines:
        if not line.get("final"):
            continue
        out.append(
            MetricsRecord(
                method=line["method"],
                dataset=line["dataset"],
                split_id=line["split_id"],
                seed=line["seed"],
                common_ratio=line["common_ratio"],
                clients=line["clients"],
                mu=line.get("mu"),
                per_client_val_acc=line["per_client_val_acc"],
                per_client_test_acc=line["per_client_test_acc"],
                mean_test_acc=line["mean_test_acc"],
            )
        )
    return out


def render_table(summaries: Sequence[MethodSummary], bold_best: bool = False) -> str:
    """Plain-text accuracy table, one row per (dataset, ratio, clients),
    methods in canonical column order."""
    rows: dict[tuple, dict[str, MethodSummary]] = {}
    methods_present: list[str] = []
    for s in summaries:
        rows.setdefault((s.dataset, s.common_ratio, s.clients), {})[s.method] = s
        if s.method not in methods_present:
            methods_present.append(s.method)
    method_cols = [m.value for m in METHOD_ORDER if m.value in methods_present]
    buf = io.StringIO()
    header = ["dataset", "ratio", "clients"] + method_cols
    buf.write("  ".join(f"{h:>22}" for h in header) + "\n")
    for key in sorted(rows):
        cells = [f"{key[0]:>22}", f"{key[1]:>22g}", f"{key[2]:>22d}"]
        best = None
        if bold_best:
            present = [rows[key][m].mean_test_acc for m in method_cols if m in rows[key]]
            best = max(present) if present else None
        for m in method_cols:
            s = rows[key].get(m)
            if s is None:
                cells.append(f"{'-':>22}")
            else:
                text = f"{s.mean_test_acc:.4f} +- {s.std_over_runs:.4f}"
                if best is not None and s.mean_test_acc == best:
                    text = "*" + text
                cells.append(f"{text:>22}")
        buf.write("  ".join(cells) + "\n")
    return buf.getvalue()
