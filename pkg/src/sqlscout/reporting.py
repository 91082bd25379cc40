"""Figures for graph statistics and evaluation reports (PNG files)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalkit import BUCKETS, EvalReport  # noqa: E402
from .schema_graph import GROUP, USES_FIELD_GROUP, SchemaGraph  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 150,
}
_META = {"Software": None}


def size(scale: float = 1.0) -> tuple[float, float]:
    width = 5.5 * scale
    return width, width * (math.sqrt(5.0) - 1.0) / 2.0


def _save(fig: plt.Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata=_META)
    plt.close(fig)
    return path


def plot_group_fanout(graph: SchemaGraph, out_dir: str | Path) -> Path:
    """Member-table count per shared field group, largest first."""
    fanouts = sorted(
        ((len(graph.in_edges(g.id, USES_FIELD_GROUP)), g.props["name"]) for g in graph.nodes_of(GROUP)),
        key=lambda p: (-p[0], p[1]),
    )
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=size())
        if fanouts:
            ax.bar(range(len(fanouts)), [f for f, _ in fanouts], color="0.35")
            ax.set_xticks(range(len(fanouts)), [n for _, n in fanouts], rotation=60, ha="right")
        else:
            ax.text(0.5, 0.5, "no shared field groups", ha="center", va="center", transform=ax.transAxes)
        ax.set_ylabel("member tables")
        ax.set_title("Shared field group fan-out")
        return _save(fig, Path(out_dir) / "group_fanout.png")


def plot_ex_by_bucket(report: EvalReport, out_dir: str | Path) -> Path:
    rows = report.ex_by_bucket()
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=size(0.8))
        values = [100 * (rows[b]["ex"] or 0.0) for b in BUCKETS]
        bars = ax.bar(BUCKETS, values, color=["0.6", "0.4", "0.2"])
        for bar, b in zip(bars, BUCKETS):
            ax.annotate(f"n={rows[b]['tasks']}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_ylim(0, 105)
        ax.set_ylabel("EX (%)")
        ax.set_title("Execution accuracy by difficulty")
        return _save(fig, Path(out_dir) / "ex_by_bucket.png")


def plot_pass_at_k(report: EvalReport, out_dir: str | Path) -> Path:
    ks = list(range(1, report.passes + 1))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=size(0.8))
        ax.plot(ks, [100 * (report.pass_at(k) or 0.0) for k in ks], marker="o", color="0.2")
        ax.set_xticks(ks)
        ax.set_ylim(0, 105)
        ax.set_xlabel("k")
        ax.set_ylabel("pass@k (%)")
        ax.set_title("pass@k")
        return _save(fig, Path(out_dir) / "pass_at_k.png")


def report_figures(report: EvalReport, out_dir: str | Path) -> list[Path]:
    return [plot_ex_by_bucket(report, out_dir), plot_pass_at_k(report, out_dir)]
