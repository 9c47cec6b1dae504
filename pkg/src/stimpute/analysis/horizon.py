"""Imputation horizon: hop distance to the nearest observed (node, frame)."""

from __future__ import annotations

import numpy as np

from ..geometry import MeshGraph


def imputation_horizon(mask: np.ndarray, mesh: MeshGraph) -> np.ndarray:
    """Multi-source BFS on the space-time graph seeded at observed entries.

    Spatial edges join (i, t)-(j, t); temporal edges join (i, t)-(i, t +/- 1).
    Unreachable entries (none on a connected mesh) stay at inf.
    """
    observed = np.asarray(mask) > 0
    if not observed.any():
        raise ValueError("horizon needs at least one observed entry")
    n, t = observed.shape
    e = mesh.edges
    src = np.r_[e[:, 0], e[:, 1]]
    dst = np.r_[e[:, 1], e[:, 0]]
    dist = np.where(observed, 0.0, np.inf)
    frontier = observed.copy()
    level = 0
    while frontier.any():
        level += 1
        reach = np.zeros_like(frontier)
        reach[:, 1:] |= frontier[:, :-1]
        reach[:, :-1] |= frontier[:, 1:]
        if src.size:
            np.logical_or.at(reach, dst, frontier[src])
        frontier = reach & np.isinf(dist)
        dist[frontier] = level
    return dist


def binned_by_horizon(horizon: np.ndarray, values: np.ndarray, keep: np.ndarray | None = None):
    """Mean of ``values`` per integer horizon level (levels with data only)."""
    h = horizon if keep is None else horizon[keep]
    v = values if keep is None else values[keep]
    finite = np.isfinite(h)
    h, v = h[finite].astype(int), v[finite]
    levels = np.unique(h)
    means = np.array([v[h == lv].mean() for lv in levels])
    counts = np.array([(h == lv).sum() for lv in levels])
    return levels, means, counts
