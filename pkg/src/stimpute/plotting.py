"""PNG figures for the report subcommands (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns produce identical bytes
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_reconstruction(path, truth: np.ndarray, pred: np.ndarray, mask: np.ndarray,
                        sampling_rate: float, nodes: int = 3) -> Path:
    """Traces of the least-observed nodes plus the hidden-entry error histogram."""
    order = np.argsort(mask.sum(axis=1), kind="stable")[:nodes]
    t = np.arange(truth.shape[1]) / sampling_rate
    fig, axes = plt.subplots(nodes + 1, 1, figsize=(8, 2 * (nodes + 1)))
    for ax, i in zip(axes, order):
        ax.plot(t, truth[i], color="k", lw=1, label="truth")
        ax.plot(t, pred[i], color="tab:red", lw=1, label="imputed")
        ax.set_ylabel(f"node {i}")
    axes[0].legend(loc="upper right", fontsize=8)
    axes[nodes - 1].set_xlabel("time (s)")
    hidden = mask == 0
    err = (pred - truth)[hidden] if hidden.any() else (pred - truth).ravel()
    axes[-1].hist(err, bins=60, color="tab:blue")
    axes[-1].set_xlabel("error on hidden entries")
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(path, cells) -> Path:
    """MAE over (area, dwell) per entropy group and CI width against horizon."""
    groups = sorted({c.group for c in cells})
    areas = sorted({c.area for c in cells})
    dwells = sorted({c.dwell for c in cells})
    fig, axes = plt.subplots(1, len(groups) + 1, figsize=(4.5 * (len(groups) + 1), 4))
    axes = np.atleast_1d(axes)
    for ax, g in zip(axes, groups):
        grid = np.full((len(dwells), len(areas)), np.nan)
        for c in cells:
            if c.group == g:
                grid[dwells.index(c.dwell), areas.index(c.area)] = c.mae
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(areas)), [f"{a:g}" for a in areas])
        ax.set_yticks(range(len(dwells)), [f"{d:g}" for d in dwells])
        ax.set_xlabel("area fraction")
        ax.set_ylabel("dwell (s)")
        ax.set_title(f"MAE, {g} entropy")
        fig.colorbar(im, ax=ax)
    ax = axes[-1]
    for c in cells:
        if c.horizon_levels:
            ax.plot(c.horizon_levels, c.ci_width, lw=0.8, alpha=0.7)
    ax.set_xlabel("imputation horizon (hops)")
    ax.set_ylabel("interval width")
    fig.tight_layout()
    return _save(fig, path)


def plot_crosscorr(path, matrices: dict[str, np.ndarray], percentiles: dict[str, list]) -> Path:
    """First correlation matrix of each comparison plus 99th percentiles with CIs."""
    names = list(matrices)
    fig, axes = plt.subplots(1, len(names) + 1, figsize=(4 * (len(names) + 1), 3.6))
    for ax, n in zip(axes, names):
        im = ax.imshow(matrices[n], vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_title(n)
        fig.colorbar(im, ax=ax)
    ax = axes[-1]
    for n, rows in percentiles.items():
        w = [r["window"] for r in rows]
        p = np.array([r["point"] for r in rows])
        lo = np.array([r["lo"] for r in rows])
        hi = np.array([r["hi"] for r in rows])
        ax.errorbar(w, p, yerr=np.vstack([p - lo, hi - p]), marker="o", capsize=3, label=n)
    ax.set_xlabel("window (s)")
    ax.set_ylabel("99th percentile correlation")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
