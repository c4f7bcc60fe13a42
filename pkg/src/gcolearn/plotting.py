"""Report figures: loss curves, per-group metrics and consensus separability."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no loss rows")
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(np.pad(y, (window - 1, 0), mode="edge"), kernel, mode="valid")


def plot_losses(loss_csv, out, window: int = 20) -> Path:
    cols = read_loss_csv(loss_csv)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        for key, label in (("l_sal", "saliency"), ("l_ctm", "inter-group"), ("l_cls", "classification"),
                           ("total", "total")):
            y = cols[key]
            if not np.any(y):
                continue
            ax.plot(cols["step"], _smooth(y, window), label=label, lw=1.2 if key != "total" else 1.8)
        ax.set_xlabel("step")
        ax.set_ylabel(f"loss (moving mean, {window})")
        ax.legend()
        return _save(fig, out)


def plot_metrics(report, out) -> Path:
    """Grouped bars of E_max, S, F_max and MAE per group plus the ALL row."""
    rows = report.rows()
    names = [r.group for r in rows]
    series = {"Emax": [r.e_max for r in rows], "S": [r.s_alpha for r in rows],
              "Fmax": [r.f_max for r in rows], "MAE": [r.mae for r in rows]}
    x = np.arange(len(rows))
    width = 0.2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.9 * len(rows) + 1.5), 3.2))
        for i, (label, vals) in enumerate(series.items()):
            ax.bar(x + (i - 1.5) * width, vals, width, label=label)
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylim(0, 1.05)
        ax.legend(ncol=4, loc="upper center", bbox_to_anchor=(0.5, 1.15))
        return _save(fig, out)


def plot_consensus(export, out) -> Path:
    """Cosine-distance matrix of the sub-batch consensus vectors, ordered by group."""
    from .engine import cosine_distances

    dist = cosine_distances(export.vectors)
    gid = np.asarray(export.group_ids)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(dist, cmap="viridis", vmin=0)
        edges = np.flatnonzero(np.diff(gid)) + 0.5
        for e in edges:
            ax.axhline(e, color="w", lw=0.8)
            ax.axvline(e, color="w", lw=0.8)
        ax.set_title(f"d1={export.d1:.3g}  d2={export.d2:.3g}  ratio={export.ratio:.3g}")
        ax.set_xlabel("sub-batch")
        ax.set_ylabel("sub-batch")
        fig.colorbar(im, ax=ax, label="cosine distance")
        return _save(fig, out)
