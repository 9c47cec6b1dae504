"""Parameter construction, partitioning and checksums."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..diffcore import Tensor
from .config import ModelConfig

GATES = ("r", "u", "c")
EMB_STD = 0.02


@dataclass
class PatientEmbeddings:
    V: Tensor  # N x q node embeddings
    g: Tensor  # r patient embedding

    @property
    def n_nodes(self) -> int:
        return self.V.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.V, self.g]

    def copy(self) -> "PatientEmbeddings":
        return PatientEmbeddings(Tensor(self.V.data.copy(), requires_grad=True, name="emb/V"),
                                 Tensor(self.g.data.copy(), requires_grad=True, name="emb/g"))


def init_embeddings(config: ModelConfig, n_nodes: int, seed: int) -> PatientEmbeddings:
    rng = np.random.default_rng(seed)
    return PatientEmbeddings(
        Tensor(rng.normal(0.0, EMB_STD, (n_nodes, config.q)), requires_grad=True, name="emb/V"),
        Tensor(rng.normal(0.0, EMB_STD, (config.r,)), requires_grad=True, name="emb/g"),
    )


def shared_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> dims of every shared parameter, in a fixed order."""
    d, q, r, c = config.d, config.q, config.r, config.n_quantiles
    enc_in = 2 + r + q  # [x, m, g, V]
    s2_in = 1 + d + 1  # [x_fill, h, m]
    shapes: dict[str, tuple[int, ...]] = {}
    directions = ("fwd", "bwd") if config.bidirectional else ("fwd",)
    for dr in directions:
        shapes[f"{dr}/enc/W1"] = (enc_in, config.enc_hidden)
        shapes[f"{dr}/enc/b1"] = (config.enc_hidden,)
        shapes[f"{dr}/enc/W2"] = (config.enc_hidden, d)
        shapes[f"{dr}/enc/b2"] = (d,)
        for k in range(config.layers):
            shapes[f"{dr}/l{k}/init/W"] = (q, d)
            shapes[f"{dr}/l{k}/init/b"] = (d,)
            for gate in GATES:
                p = f"{dr}/l{k}/{gate}"
                shapes[f"{p}/msg/Wi"] = (2 * d, d)
                shapes[f"{p}/msg/Wj"] = (2 * d, d)
                shapes[f"{p}/msg/b"] = (d,)
                shapes[f"{p}/alpha/w"] = (d, 1)
                shapes[f"{p}/upd/W1"] = (2 * d, d)
                shapes[f"{p}/upd/b1"] = (d,)
                shapes[f"{p}/upd/W2"] = (d, d)
                shapes[f"{p}/upd/b2"] = (d,)
                shapes[f"{p}/skip/W"] = (2 * d, d)
        shapes[f"{dr}/s1/W"] = (d, c)
        shapes[f"{dr}/s1/b"] = (c,)
        for o in range(config.diffusion_order + 1):
            shapes[f"{dr}/s2/theta{o}"] = (s2_in, d)
        shapes[f"{dr}/s2/b"] = (d,)
        shapes[f"{dr}/s2/W"] = (2 * d, c)
        shapes[f"{dr}/s2/bo"] = (c,)
    dec_in = len(directions) * 2 * d + 1 + q + r
    shapes["dec/W1"] = (dec_in, config.dec_hidden)
    shapes["dec/b1"] = (config.dec_hidden,)
    shapes["dec/W2"] = (config.dec_hidden, c)
    shapes["dec/b2"] = (c,)
    return shapes


def init_shared(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Weights uniform in +-1/sqrt(fan_in); biases zero."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shared_shapes(config).items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(max(shape[0], 1))
            data = rng.uniform(-bound, bound, shape)
        else:
            data = np.zeros(shape)
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def is_patient_specific(name: str) -> bool:
    return name.startswith("emb/")


def checksum(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
