"""Batched graphs: a batch of windows is one disjoint union of patient graphs."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..diffcore import IndexMap
from ..geometry import MeshGraph


def sym_normalised(adj: sp.csr_matrix) -> sp.csr_matrix:
    """D^-1/2 A D^-1/2; isolated nodes get an all-zero row."""
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    return (sp.diags(inv) @ adj @ sp.diags(inv)).tocsr()


class GraphBatch:
    """Edge index maps and diffusion operator for stacked node sets.

    Directed edges are sorted by (target, source) so sum aggregation has a
    fixed order. ``window_of_node`` maps each stacked node to its window.
    """

    def __init__(self, adjacencies: list[sp.spmatrix], use_graph: bool = True):
        sizes = [a.shape[0] for a in adjacencies]
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n = int(self.offsets[-1])
        self.n_windows = len(sizes)
        self.window_of_node = np.repeat(np.arange(len(sizes)), sizes)
        if use_graph:
            adj = sp.block_diag(adjacencies, format="csr")
        else:
            adj = sp.csr_matrix((self.n, self.n))
        adj = adj.tocoo()
        order = np.lexsort((adj.col, adj.row))
        dst, src = adj.row[order].astype(np.int64), adj.col[order].astype(np.int64)
        self.dst = IndexMap(dst, self.n)
        self.src = IndexMap(src, self.n)
        self.n_edges = dst.size
        a = sp.csr_matrix((np.ones(dst.size), (dst, src)), shape=(self.n, self.n))
        self.diffusion = sym_normalised(a)
        self.windows = IndexMap(self.window_of_node, len(sizes))

    @classmethod
    def from_meshes(cls, meshes: list[MeshGraph], use_graph: bool = True) -> "GraphBatch":
        return cls([m.adjacency() for m in meshes], use_graph)

    def split(self, array: np.ndarray, axis: int = 0) -> list[np.ndarray]:
        """Cut a stacked-node array back into per-window pieces."""
        return np.split(array, self.offsets[1:-1], axis=axis)
