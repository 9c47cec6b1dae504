"""Bidirectional encoder pass, decoder and the combined quantile loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Tensor, ops
from .config import ModelConfig
from .graph import GraphBatch
from .layers import decode, encode_frame, grnn_cell_step, init_hidden, stage_one, stage_two
from .params import PatientEmbeddings


@dataclass
class EncoderTrace:
    """Per-frame outputs of one direction, in forward time order."""
    S: list[Tensor]
    H: list[Tensor]
    x1: list[Tensor]
    x2: list[Tensor]


@dataclass
class ForwardOutput:
    Y: Tensor  # (W, N, |C|)
    heads: dict[str, Tensor]  # "x1_fwd", "x2_fwd", ... each (W, N, |C|)
    traces: dict[str, EncoderTrace]

    def median(self, config: ModelConfig) -> np.ndarray:
        k = config.median_index
        return self.Y.data[..., k]


def st_encode(X: np.ndarray, M: np.ndarray, V: Tensor, G: Tensor, graph: GraphBatch,
              params: dict[str, Tensor], config: ModelConfig, direction: str = "fwd") -> EncoderTrace:
    """Run the recurrent encoder over a (W, N) window in one direction.

    Missing entries are first filled with the stage-1 median, then with the
    stage-2 median; observed entries are never overwritten. With
    ``direction="bwd"`` the window is processed in reverse and the trace is
    flipped back so index t always refers to frame t.
    """
    X = np.asarray(X, float)
    M = np.asarray(M, float)
    if X.ndim != 2 or X.shape != M.shape:
        raise ValueError("window values and mask must be (W, N) with equal dims")
    if X.shape[0] < 2:
        raise ValueError("window length must be at least 2")
    X = X * M
    if direction == "bwd":
        X, M = X[::-1], M[::-1]
    med = config.median_index
    h = [init_hidden(V, params, direction, k) for k in range(config.layers)]
    S, H, X1, X2 = [], [], [], []
    for t in range(X.shape[0]):
        x_t = X[t][:, None]
        m_t = M[t][:, None]
        seen = m_t > 0
        top = h[-1]
        x1 = stage_one(top, params, direction)
        fill1 = ops.where(seen, x_t, ops.columns(x1, med, med + 1))
        s, x2 = stage_two(top, fill1, m_t, graph, params, direction, config.diffusion_order)
        fill2 = ops.where(seen, x_t, ops.columns(x2, med, med + 1))
        z = encode_frame(fill2, m_t, G, V, params, direction)
        for k in range(config.layers):
            h[k] = grnn_cell_step(h[k], z, graph, params, f"{direction}/l{k}")
            z = h[k]
        S.append(s)
        H.append(h[-1])
        X1.append(x1)
        X2.append(x2)
    if direction == "bwd":
        S, H, X1, X2 = S[::-1], H[::-1], X1[::-1], X2[::-1]
    return EncoderTrace(S, H, X1, X2)


def stack_embeddings(embeddings: list[PatientEmbeddings], graph: GraphBatch) -> tuple[Tensor, Tensor]:
    """Node embedding rows and broadcast patient embeddings for the stacked batch."""
    if len(embeddings) != graph.n_windows:
        raise ValueError("one embedding set per window is required")
    for e, n in zip(embeddings, graph.sizes):
        if e.n_nodes != n:
            raise ValueError("embedding node count does not match the graph")
    V = ops.concat([e.V for e in embeddings], axis=0)
    G = ops.gather(ops.stack([e.g for e in embeddings], axis=0), graph.windows)
    return V, G


def forward(params: dict[str, Tensor], embeddings: list[PatientEmbeddings], graph: GraphBatch,
            X: np.ndarray, M: np.ndarray, config: ModelConfig) -> ForwardOutput:
    """Full model on a stacked (W, N_total) window batch."""
    V, G = stack_embeddings(embeddings, graph)
    directions = ["fwd", "bwd"] if config.bidirectional else ["fwd"]
    traces = {d: st_encode(X, M, V, G, graph, params, config, d) for d in directions}
    M = np.asarray(M, float)
    Y = []
    for t in range(M.shape[0]):
        parts = []
        for d in directions:
            parts += [traces[d].S[t], traces[d].H[t]]
        parts += [M[t][:, None], V, G]
        Y.append(decode(parts, params))
    heads = {}
    for d in directions:
        heads[f"x1_{d}"] = ops.stack(traces[d].x1, axis=0)
        heads[f"x2_{d}"] = ops.stack(traces[d].x2, axis=0)
    return ForwardOutput(ops.stack(Y, axis=0), heads, traces)


def combined_loss(out: ForwardOutput, target: np.ndarray, eval_mask: np.ndarray,
                  config: ModelConfig) -> Tensor:
    """Sum of the masked pinball losses of the final and every stage head."""
    loss = ops.pinball(out.Y, target, eval_mask, config.quantiles)
    for name in sorted(out.heads):
        loss = ops.add(loss, ops.pinball(out.heads[name], target, eval_mask, config.quantiles))
    return loss
