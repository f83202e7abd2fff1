"""Report rendering: combined markdown across pool sizes plus matplotlib
figures (metric trends over pool size, quality/time trade-off scatters)
written alongside the delimited evaluation output."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

METRIC_PANELS = [
    ("sparsity_mean", "Sparsity"),
    ("k_validity_mean", "k-validity"),
    ("validity_mean", "1-validity"),
    ("time_mean", "time (s)"),
    ("log_lof_mean", "log-LOF"),
]


def read_eval_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def render_metric_trends(eval_paths: dict, out_path) -> None:
    """One panel per metric, pool size on the x axis, a line per method."""
    frames = {size: read_eval_csv(p) for size, p in sorted(eval_paths.items())}
    sizes = sorted(frames)
    methods = list(frames[sizes[0]]["method"])
    fig, axes = plt.subplots(1, len(METRIC_PANELS), figsize=(4 * len(METRIC_PANELS), 3.2))
    for ax, (col, label) in zip(axes, METRIC_PANELS):
        for method in methods:
            ys = []
            for size in sizes:
                frame = frames[size]
                row = frame[frame["method"] == method]
                val = row[col].iloc[0] if len(row) else float("nan")
                ys.append(val)
            ax.plot(sizes, ys, marker="o", label=method)
        ax.set_xlabel("attack pool size")
        ax.set_ylabel(label)
        ax.set_xticks(sizes)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_tradeoffs(eval_path, out_path) -> None:
    """Sparsity / validity / log-LOF against generation time."""
    frame = read_eval_csv(eval_path)
    panels = [("sparsity_mean", "sparsity"), ("validity_mean", "1-validity"),
              ("log_lof_mean", "log-LOF")]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    for ax, (col, label) in zip(axes, panels):
        for _, row in frame.iterrows():
            if pd.isna(row[col]) or pd.isna(row["time_mean"]):
                continue
            ax.scatter(row[col], row["time_mean"], label=row["method"])
        ax.set_xlabel(label)
        ax.set_ylabel("time (s)")
        ax.grid(alpha=0.3)
    handles, labels = axes[0].get_legend_handles_labels()
    if handles:
        axes[-1].legend(handles, labels, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_markdown(out_dir, pool_sizes, figures) -> str:
    lines = ["# Counterfactual evaluation report", ""]
    for size in pool_sizes:
        md = os.path.join(out_dir, f"eval_pool{size}.md")
        if not os.path.exists(md):
            continue
        lines.append(f"## Attack pool: {size} queries")
        lines.append("")
        lines.append(open(md).read().rstrip())
        lines.append("")
    lines.append("## Figures")
    lines.append("")
    for caption, rel in figures:
        lines.append(f"![{caption}]({rel})")
        lines.append("")
    path = os.path.join(out_dir, "report.md")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
    return path


def run_report(cfg, out_dir) -> list[str]:
    """Render figures + the combined markdown from existing evaluation CSVs."""
    pool_sizes = cfg["evaluate"]["pool_sizes"]
    eval_paths = {
        size: os.path.join(out_dir, f"eval_pool{size}.csv")
        for size in pool_sizes
        if os.path.exists(os.path.join(out_dir, f"eval_pool{size}.csv"))
    }
    if not eval_paths:
        raise FileNotFoundError("no eval_pool*.csv found; run `evaluate` first")
    figures = []
    trends = os.path.join(out_dir, "fig_metrics_vs_pool.png")
    render_metric_trends(eval_paths, trends)
    figures.append(("metrics vs pool size", os.path.basename(trends)))
    largest = max(eval_paths)
    scatter = os.path.join(out_dir, f"fig_tradeoffs_pool{largest}.png")
    render_tradeoffs(eval_paths[largest], scatter)
    figures.append((f"quality/time trade-offs at pool {largest}", os.path.basename(scatter)))
    md = render_markdown(out_dir, sorted(eval_paths), figures)
    return [md] + [p for _, p in figures]
