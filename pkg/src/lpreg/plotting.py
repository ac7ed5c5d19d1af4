"""SVG figures rendered from a run directory's metrics.csv and probes.jsonl."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import telemetry  # noqa: E402

FIGURES = ("curves", "density", "scatter", "gap")
CLASS_COLORS = {"spark": "#d62728", "irrelevant": "#7f7f7f", "other": "#1f77b4"}

STYLE = {
    "svg.hashsalt": "lpreg",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _series(rows, key):
    xs, ys = [], []
    for r in rows:
        v = getattr(r, key)
        if v is not None and not (isinstance(v, float) and math.isnan(v)):
            xs.append(r.step)
            ys.append(v)
    return xs, ys


def plot_curves(rows, path: Path) -> Path:
    panels = [("eval_accuracy", "eval accuracy"), ("mean_entropy", "mean entropy (nats)"),
              ("spark_frequency", "spark token frequency"), ("delta", "batch threshold"),
              ("reg_ratio", "regularization ratio"), ("loss", "loss")]
    fig, axes = plt.subplots(2, 3, figsize=(10, 5.5))
    for ax, (key, label) in zip(axes.ravel(), panels):
        xs, ys = _series(rows, key)
        if xs:
            ax.plot(xs, ys, lw=1.0, color="#1f77b4", marker="o" if key == "eval_accuracy" else None, ms=2)
        ax.set_title(label)
        ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, path)


def plot_density(records, path: Path, bins: int = 50, window: int = 100) -> Path:
    classes = ("spark", "irrelevant", "other")
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharey=True)
    edges = np.linspace(0.0, 1.0, bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    for ax, cls in zip(axes, classes):
        hists = telemetry.density_summary([r for r in records if r.cls == cls], bins, window)
        cmap = plt.get_cmap("viridis")
        for i, (start, h) in enumerate(hists.items()):
            ax.plot(centres, h, lw=0.9, color=cmap(i / max(len(hists) - 1, 1)), label=f"steps {start}+")
        ax.set_title(f"{cls} tokens")
        ax.set_xlabel("sampling probability")
        if len(hists) <= 8 and hists:
            ax.legend(frameon=False)
    axes[0].set_ylabel("mass")
    fig.tight_layout()
    return _save(fig, path)


def plot_scatter(records, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls in ("other", "irrelevant", "spark"):
        pts = [(r.sampled_prob, r.position_entropy) for r in records if r.cls == cls]
        if pts:
            p, e = zip(*pts)
            ax.scatter(p, e, s=4, alpha=0.5, color=CLASS_COLORS[cls], label=cls, linewidths=0)
    ax.set_xscale("log")
    ax.set_xlabel("sampling probability")
    ax.set_ylabel("position entropy (nats)")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def plot_gap(records, path: Path, window=(0.0, 0.1)) -> Path:
    gap = telemetry.class_mean_prob_gap(records, window)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if gap:
        steps = [g["step"] for g in gap]
        ax.plot(steps, [g["spark_mean"] for g in gap], color=CLASS_COLORS["spark"], lw=1, label="spark")
        ax.plot(steps, [g["irrelevant_mean"] for g in gap], color=CLASS_COLORS["irrelevant"], lw=1,
                label="irrelevant")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel(f"mean prob within [{window[0]}, {window[1]}]")
    fig.tight_layout()
    return _save(fig, path)


def render(run_dir, figure: str) -> Path | None:
    """Render one figure from files in ``run_dir``; None when the run has no rows."""
    run = Path(run_dir)
    rows = telemetry.read_metrics(run / "metrics.csv")
    if not rows:
        return None
    with plt.rc_context(STYLE):
        if figure == "curves":
            return plot_curves(rows, run / "curves.svg")
        records = telemetry.read_probes(run / "probes.jsonl")
        if figure == "density":
            return plot_density(records, run / "density.svg")
        if figure == "scatter":
            return plot_scatter(records, run / "scatter.svg")
        if figure == "gap":
            return plot_gap(records, run / "gap.svg")
    raise ValueError(f"unknown figure {figure!r}; expected one of {FIGURES}")


def render_all(run_dir) -> list[Path]:
    return [p for p in (render(run_dir, f) for f in FIGURES) if p is not None]
