"""Line and bar figures rendered next to the CSV reports (Agg backend, PNG)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}

# no timestamps or version strings, so reruns produce identical files
PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_metrics(history, path, title: str = "") -> Path:
    """Train/test loss against iteration, transport cost on a log-scaled twin axis."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        its = [r.iteration for r in history]
        ax.plot(its, [r.train_loss for r in history], label="train loss", color="C0", alpha=0.6)
        ax.plot(its, [r.test_loss for r in history], label="test loss", color="C1")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss (nats/token)")
        ax2 = ax.twinx()
        cost = [r.transport_cost for r in history]
        ax2.plot(its, cost, color="C2", ls="--", label="transport cost")
        if cost and min(cost) > 0:
            ax2.set_yscale("log")
        ax2.set_ylabel("transport cost")
        ax2.grid(False)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="upper right")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_drops(tables, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for t in tables:
            ax.plot(t.rates, t.drops, marker="o", label=t.label)
        ax.set_xlabel("replace rate")
        ax.set_ylabel("test-loss drop")
        ax.legend()
        return _save(fig, path)


def plot_ablation(cells, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for steps in sorted({c.steps for c in cells}):
            sub = [c for c in cells if c.steps == steps and c.final_test_loss is not None]
            if sub:
                ax.plot([c.lam for c in sub], [c.final_test_loss for c in sub], marker="o", label=f"M={steps}")
            bad = [c for c in cells if c.steps == steps and c.final_test_loss is None]
            for c in bad:
                ax.axvline(c.lam, color="C3", ls=":", lw=1)
        ax.set_xlabel("lambda")
        ax.set_ylabel("final test loss")
        ax.legend()
        return _save(fig, path)


def plot_theory(results, path) -> Path:
    """Bound tightness (observed / allowed) histograms of the stability suites."""
    hist = [r for r in results if "tightness_counts" in r.extra]
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        edges = [i / 10 for i in range(10)]
        width = 0.1 / max(len(hist), 1)
        for k, r in enumerate(hist):
            ax.bar([e + k * width for e in edges], r.extra["tightness_counts"], width=width, align="edge",
                   label=f"{r.suite} ({r.head})")
        ax.set_xlim(0, 1)
        ax.set_xlabel("observed / bound")
        ax.set_ylabel("pairs")
        if hist:
            ax.legend()
        return _save(fig, path)


def plot_series(xs: Sequence[float], ys: dict[str, Sequence[float]], path, xlabel: str, ylabel: str) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for label, y in ys.items():
            ax.plot(xs, y, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)
