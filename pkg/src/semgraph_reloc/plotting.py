"""Precision-recall figures rendered to files (headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_pr_curves(curves: dict, path, title: str = "Precision-recall") -> Path:
    """One line per entry of ``curves`` (name -> [(P, R, threshold), ...])."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 4.0), dpi=120)
    for name, points in curves.items():
        # drawn in order of increasing recall
        pts = sorted(points, key=lambda t: (t[1], -t[0]))
        ax.plot([r for _, r, _ in pts], [p for p, _, _ in pts], marker=".", ms=3, lw=1.2, label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
