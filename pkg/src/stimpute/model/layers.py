"""Building blocks of the gated graph recurrent encoder and the decoder.

All node tensors are (nodes, features); batches are stacked node sets.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..diffcore import Tensor
from ..diffcore import ops
from .graph import GraphBatch


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """One tanh hidden layer, linear output."""
    return ops.linear(ops.tanh(ops.linear(x, w1, b1)), w2, b2)


def encode_frame(x: Tensor | np.ndarray, m: np.ndarray, G: Tensor, V: Tensor,
                 p: dict[str, Tensor], prefix: str) -> Tensor:
    """H0 = MLP_enc([x | m | G | V]) for one frame; ``x`` already carries the mask."""
    z = ops.concat([x, m, G, V], axis=-1)
    return mlp(z, p[f"{prefix}/enc/W1"], p[f"{prefix}/enc/b1"],
               p[f"{prefix}/enc/W2"], p[f"{prefix}/enc/b2"])


def init_hidden(V: Tensor, p: dict[str, Tensor], prefix: str, k: int) -> Tensor:
    return ops.linear(V, p[f"{prefix}/l{k}/init/W"], p[f"{prefix}/l{k}/init/b"])


def mp_gates(o: Tensor, h: Tensor, graph: GraphBatch, p: dict[str, Tensor],
             gates: Sequence[str]) -> list[Tensor]:
    """Message-passing layers sharing one input ``o``, one per gate prefix.

    m_ij = tanh(o_i Wi + o_j Wj + b); alpha_ij = sigmoid(m_ij w); the
    alpha-weighted messages are summed at i, and the output is
    MLP_update([h_i | m_i]) + o_i W_skip. First-layer edge work for all gates is
    fused into one pass; the per-gate maths is unchanged.
    """
    wi = ops.concat([p[f"{g}/msg/Wi"] for g in gates], axis=1)
    wj = ops.concat([p[f"{g}/msg/Wj"] for g in gates], axis=1)
    b = ops.concat([p[f"{g}/msg/b"] for g in gates], axis=0)
    edge = ops.tanh(ops.add(ops.edge_pair(ops.matmul(o, wi), ops.matmul(o, wj),
                                          graph.dst, graph.src), b))
    d = h.shape[-1]
    out = []
    for n, g in enumerate(gates):
        msg = edge if len(gates) == 1 else ops.columns(edge, n * d, (n + 1) * d)
        alpha = ops.sigmoid(ops.matmul(msg, p[f"{g}/alpha/w"]))
        agg = ops.scatter_sum(ops.mul(msg, alpha), graph.dst)
        u = mlp(ops.concat([h, agg], axis=-1), p[f"{g}/upd/W1"], p[f"{g}/upd/b1"],
                p[f"{g}/upd/W2"], p[f"{g}/upd/b2"])
        out.append(ops.add(u, ops.matmul(o, p[f"{g}/skip/W"])))
    return out


def grnn_cell_step(h_prev: Tensor, z: Tensor, graph: GraphBatch, p: dict[str, Tensor],
                   prefix: str) -> Tensor:
    """Gated update H = U*H_prev + (1-U)*C with message-passing gates."""
    o = ops.concat([z, h_prev], axis=-1)
    r_pre, u_pre = mp_gates(o, h_prev, graph, p, [f"{prefix}/r", f"{prefix}/u"])
    r, u = ops.sigmoid(r_pre), ops.sigmoid(u_pre)
    rh = ops.mul(r, h_prev)
    (c_pre,) = mp_gates(ops.concat([z, rh], axis=-1), rh, graph, p, [f"{prefix}/c"])
    c = ops.tanh(c_pre)
    return ops.add(ops.mul(u, h_prev), ops.mul(ops.sub(1.0, u), c))


def stage_one(h: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    """One-step-ahead linear readout, one column per quantile."""
    return ops.linear(h, p[f"{prefix}/s1/W"], p[f"{prefix}/s1/b"])


def stage_two(h: Tensor, fill: Tensor, m: np.ndarray, graph: GraphBatch, p: dict[str, Tensor],
              prefix: str, order: int) -> tuple[Tensor, Tensor]:
    """Diffusion convolution over [x_fill | h | m], then [S | H] readout."""
    f = ops.concat([fill, h, m], axis=-1)
    s = ops.add(ops.matmul(f, p[f"{prefix}/s2/theta0"]), p[f"{prefix}/s2/b"])
    power = f
    for k in range(1, order + 1):
        power = ops.propagate(graph.diffusion, power, graph.diffusion)  # symmetric
        s = ops.add(s, ops.matmul(power, p[f"{prefix}/s2/theta{k}"]))
    x2 = ops.linear(ops.concat([s, h], axis=-1), p[f"{prefix}/s2/W"], p[f"{prefix}/s2/bo"])
    return s, x2


def decode(parts: Sequence[Tensor | np.ndarray], p: dict[str, Tensor]) -> Tensor:
    """MLP_dec over the concatenated representations; |C| outputs per node."""
    return mlp(ops.concat(list(parts), axis=-1), p["dec/W1"], p["dec/b1"], p["dec/W2"], p["dec/b2"])
