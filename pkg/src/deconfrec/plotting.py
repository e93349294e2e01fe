"""Figures for curve tables: one panel per metric, one line per method."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "deconfrec",
}

XLABELS = {"K": "top-K", "fraction": "injected unbiased fraction"}


def figsize(width=3.4, nrows=1, ncols=1):
    return (width * ncols, width * GOLDEN * nrows)


def plot_curves(rows, path, metrics=None, title=None):
    """Render long-format rows ``(method, x_name, x, metric, value)`` to ``path``.

    The file type follows the suffix; PNG output carries no timestamp metadata
    so reruns are byte-stable.
    """
    series = defaultdict(lambda: defaultdict(list))
    x_name = None
    for r in rows:
        series[r["metric"]][r["method"]].append((r["x"], r["value"]))
        x_name = r["x_name"]
    metrics = [m for m in (metrics or series) if m in series]
    if not metrics:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=figsize(3.0, 1, len(metrics)), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            for method, pts in sorted(series[metric].items()):
                pts.sort()
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o" if len(pts) < 12 else None,
                        ms=3, lw=1.2, label=method)
            ax.set_xlabel(XLABELS.get(x_name, x_name))
            ax.set_ylabel(metric.upper() if metric in ("hr", "iou", "ndcg") else metric.capitalize())
        axes[0][0].legend(frameon=False)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        path = Path(path)
        meta = {"Software": None} if path.suffix == ".png" else ({"Date": None} if path.suffix in (".svg", ".pdf") else None)
        fig.savefig(path, metadata=meta)
        plt.close(fig)
    return path
