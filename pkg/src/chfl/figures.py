"""Figure rendering for sweep reports.

Writes PNG files next to the delimited output; uses the Agg backend so
headless runs work.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .federation import METHOD_ORDER, Method
from .harness import MethodSummary

_LABELS = {
    "common": "Common (FedAvg)",
    "local": "Local",
    "chfl_mu0": "CHFL mu=0",
    "chfl": "CHFL mu>0",
    "concat": "Concat",
}


def _series(summaries: Sequence[MethodSummary], x_attr: str):
    by_method: dict[str, list[MethodSummary]] = {}
    for s in summaries:
        by_method.setdefault(s.method, []).append(s)
    for m in METHOD_ORDER:
        rows = by_method.get(m.value)
        if not rows:
            continue
        rows = sorted(rows, key=lambda s: getattr(s, x_attr))
        xs = [getattr(s, x_attr) for s in rows]
        ys = [s.mean_test_acc for s in rows]
        es = [s.std_over_runs for s in rows]
        yield m.value, xs, ys, es


def _sweep_figure(summaries, x_attr: str, x_label: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for method, xs, ys, es in _series(summaries, x_attr):
        ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=_LABELS.get(method, method))
    ax.set_xlabel(x_label)
    ax.set_ylabel("mean test accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def ratio_sweep_figure(summaries: Sequence[MethodSummary], path) -> Path:
    """Accuracy against the shared-feature ratio, one line per method."""
    return _sweep_figure(summaries, "common_ratio", "common feature ratio", Path(path))


def client_sweep_figure(summaries: Sequence[MethodSummary], path) -> Path:
    """Accuracy against the number of clients, one line per method."""
    return _sweep_figure(summaries, "clients", "clients", Path(path))


def render_report_figures(summaries: Sequence[MethodSummary], out_dir) -> list[Path]:
    """Render whichever sweep figures the summaries support (>1 x value)."""
    out_dir = Path(out_dir)
    written = []
    if len({s.common_ratio for s in summaries}) > 1:
        written.append(ratio_sweep_figure(summaries, out_dir / "accuracy_vs_common_ratio.png"))
    if len({s.clients for s in summaries}) > 1:
        written.append(client_sweep_figure(summaries, out_dir / "accuracy_vs_clients.png"))
    return written
