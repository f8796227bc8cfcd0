"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .optimize import LossBreakdown  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}
# no timestamps or version strings, so reruns produce identical bytes
_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)


def plot_trace(trace: Sequence[LossBreakdown], path: str | Path, title: str = "") -> None:
    """Normalized total and image loss per iteration, log scale."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        it = np.array([r.iteration for r in trace])
        tot = np.array([r.l_total for r in trace])
        img = np.array([r.l_img for r in trace])
        if len(trace) and tot[0] > 0:
            ax.semilogy(it, tot / tot[0], label="total (normalized)")
            ax.semilogy(it, img / tot[0], "--", label="image")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss / first iteration")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_traces(traces: dict[str, Sequence[LossBreakdown]], path: str | Path) -> None:
    """Several normalized total-loss curves on one axis."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, trace in traces.items():
            tot = np.array([r.l_total for r in trace])
            if len(tot) and tot[0] > 0:
                ax.semilogy(np.arange(1, len(tot) + 1), tot / tot[0], label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("normalized total loss")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_rounds(rounds: Sequence, path: str | Path) -> None:
    """Chamfer distance of twin and planned geometry, and E_max, per print round."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        t = [r.t for r in rounds]
        ax.plot(t, [r.chamfer_planned for r in rounds], "o-", label="planned vs GT")
        ax.plot(t, [r.chamfer_twin for r in rounds], "s-", label="twin vs GT")
        ax.plot(t, [r.e_max for r in rounds], "^:", label="E_max (twin)")
        ax.set_xlabel("round")
        ax.set_ylabel("mm")
        ax.set_xticks(t)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_views(rendered: Sequence, captured: Sequence, path: str | Path, max_views: int = 4) -> None:
    """Rendered vs captured views and their difference."""
    n = min(len(rendered), len(captured), max_views)
    if n == 0:
        return
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(3, n, figsize=(2.0 * n, 6.0), squeeze=False)
        for i in range(n):
            r, c = np.asarray(rendered[i]), np.asarray(captured[i])
            for row, (img, cmap, lim) in enumerate(((c, "gray", (0, 1)), (r, "gray", (0, 1)), (r - c, "coolwarm", (-1, 1)))):
                ax = axes[row, i]
                ax.imshow(img, cmap=cmap, vmin=lim[0], vmax=lim[1])
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
        for row, label in enumerate(("captured", "twin", "difference")):
            axes[row, 0].set_ylabel(label)
        _save(fig, path)
