"""Command-line interface.

Subcommands: run, sweep-ratio, sweep-clients, corr-split, gradcheck, report.
Experiment specs are JSON files (see harness.load_spec); metrics stream as
line-delimited JSON and summaries as CSV. Exit status is nonzero whenever an
invariant self-check or gradient check fails.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import harness
from .errors import ChflError
from .gradcheck import run_gradient_checks


def _cmd_run(args) -> int:
    spec = harness.load_spec(args.spec)
    if args.output:
        spec.output = args.output
    result = harness.run_experiment(spec)
    print(harness.render_table(result.summaries, bold_best=args.bold_best), end="")
    if spec.output:
        print(f"metrics: {Path(spec.output) / 'metrics.jsonl'}")
        print(f"summary: {Path(spec.output) / 'summary.csv'}")
    return 0


def _cmd_sweep_ratio(args) -> int:
    spec = harness.load_spec(args.spec)
    if args.output:
        spec.output = args.output
    result = harness.sweep_ratio(spec, args.ratios)
    for skip in result.skipped:
        print(f"warning: skipped ratio {skip['common_ratio']}: {skip['reason']}", file=sys.stderr)
    print(harness.render_table(result.summaries), end="")
    if spec.output:
        from .figures import render_report_figures

        for path in render_report_figures(result.summaries, spec.output):
            print(f"figure: {path}")
    return 0


def _cmd_sweep_clients(args) -> int:
    spec = harness.load_spec(args.spec)
    if args.output:
        spec.output = args.output
    result = harness.sweep_clients(spec, args.clients)
    for skip in result.skipped:
        print(f"warning: skipped clients={skip['clients']}: {skip['reason']}", file=sys.stderr)
    print(harness.render_table(result.summaries), end="")
    if spec.output:
        from .figures import render_report_figures

        for path in render_report_figures(result.summaries, spec.output):
            print(f"figure: {path}")
    return 0


def _cmd_corr_split(args) -> int:
    ds = data_mod.load_csv(args.data, _label_column(args.label_column), has_header=not args.no_header)
    tags = data_mod.split_train_val_test(
        ds.n, (0.6, 0.2, 0.2), np.random.default_rng([args.seed, 0])
    )
    train_rows = ds.features[tags == data_mod.TRAIN]
    selection = data_mod.select_split_by_correlation(
        train_rows, args.k, args.ratio, args.candidates, np.random.default_rng([args.seed, 1])
    )
    doc = {
        "dataset": ds.name,
        "candidates": args.candidates,
        "seed": args.seed,
        "max": json.loads(data_mod.plan_to_json(selection.max_plan, score=selection.max_score)),
        "median": json.loads(data_mod.plan_to_json(selection.median_plan, score=selection.median_score)),
        "min": json.loads(data_mod.plan_to_json(selection.min_plan, score=selection.min_score)),
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
        print(f"plans: {args.output}")
    else:
        print(text)
    print(
        f"scores: max={selection.max_score:.4f} "
        f"median={selection.median_score:.4f} min={selection.min_score:.4f}"
    )
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradient_checks(seed=args.seed, cases_per_depth=args.cases)
    worst = 0.0
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} rel_err={r.rel_error:.3e} tol={r.tolerance:.0e} {r.name}")
        worst = max(worst, r.rel_error)
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed (worst rel_err {worst:.3e})")
    return 1 if failed else 0


def _cmd_report(args) -> int:
    lines: list[dict] = []
    for path in args.records:
        lines.extend(harness.read_jsonl(path))
    records = harness.records_from_round_lines(lines)
    if not records:
        print("no final records found", file=sys.stderr)
        return 1
    summaries = harness.summarize(records)
    if args.format == "table":
        print(harness.render_table(summaries, bold_best=args.bold_best), end="")
    else:
        print(harness.summary_csv_text(summaries), end="")
    if args.output:
        harness.write_summary_csv(args.output, summaries)
        print(f"summary: {args.output}")
    if args.figures:
        from .figures import render_report_figures

        for path in render_report_figures(summaries, args.figures):
            print(f"figure: {path}")
    return 0


def _label_column(value: str):
    try:
        return int(value)
    except ValueError:
        return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment spec")
    p.add_argument("spec", help="JSON experiment spec file")
    p.add_argument("--output", help="override the spec's output directory")
    p.add_argument("--bold-best", action="store_true", help="mark the best method per row")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep-ratio", help="run the spec across common-feature ratios")
    p.add_argument("spec")
    p.add_argument("--ratios", type=float, nargs="+", required=True)
    p.add_argument("--output")
    p.set_defaults(func=_cmd_sweep_ratio)

    p = sub.add_parser("sweep-clients", help="run the spec across client counts")
    p.add_argument("spec")
    p.add_argument("--clients", type=int, nargs="+", required=True)
    p.add_argument("--output")
    p.set_defaults(func=_cmd_sweep_clients)

    p = sub.add_parser("corr-split", help="pick max/median/min correlation feature plans")
    p.add_argument("data", help="CSV file")
    p.add_argument("--label-column", required=True, help="name or 0-based index")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.3)
    p.add_argument("--candidates", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", help="write the chosen plans as JSON")
    p.set_defaults(func=_cmd_corr_split)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=2, help="random MLP cases per depth")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="summarize metrics.jsonl files into a table/CSV/figures")
    p.add_argument("records", nargs="+", help="metrics.jsonl files")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--output", help="summary CSV path")
    p.add_argument("--figures", help="directory for rendered sweep figures")
    p.add_argument("--bold-best", action="store_true")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
