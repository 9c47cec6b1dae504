"""Reference imputers: node mean, low-rank matrix factorisation, univariate (Bi-)RNN."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, ops
from .model import ModelConfig, PatientEmbeddings
from .model.layers import mlp
from .trainer import Patient, TrainConfig, TrainResult, predict_quantiles, train_model

log = logging.getLogger(__name__)


def _check(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, float)
    mask = np.asarray(mask, float)
    if values.ndim != 2 or values.shape != mask.shape:
        raise ValueError("values and mask must be N x T with equal dims")
    return values, mask


def mean_impute(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill each node's gaps with the mean of its observed frames.

    A node with no observation at all takes the global observed mean.
    """
    values, mask = _check(values, mask)
    seen = mask > 0
    if not seen.any():
        raise ValueError("nothing is observed")
    counts = seen.sum(axis=1)
    sums = np.where(seen, values, 0.0).sum(axis=1)
    fallback = sums.sum() / counts.sum()
    node_mean = np.where(counts > 0, sums / np.maximum(counts, 1), fallback)
    return np.where(seen, values, node_mean[:, None])


@dataclass
class MFState:
    U: np.ndarray  # N x rank
    Vf: np.ndarray  # T x rank
    ridge: float
    objective: list[float] = field(default_factory=list)  # after every half-sweep

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def reconstruction(self) -> np.ndarray:
        return self.U @ self.Vf.T


def _ridge_rows(values: np.ndarray, mask: np.ndarray, other: np.ndarray, ridge: float) -> np.ndarray:
    """Row-wise argmin_u sum_t m_t (x_t - u.v_t)^2 + ridge |u|^2."""
    rank = other.shape[1]
    gram = np.einsum("it,tk,tl->ikl", mask, other, other) + ridge * np.eye(rank)
    rhs = (mask * values) @ other
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def _objective(values, mask, U, Vf, ridge) -> float:
    r = mask * (values - U @ Vf.T)
    return float((r * r).sum() + ridge * ((U * U).sum() + (Vf * Vf).sum()))


def mf_fit(values: np.ndarray, mask: np.ndarray, rank: int = 10, iterations: int = 50,
           ridge: float = 1e-3, seed: int = 0) -> MFState:
    """Alternating ridge least squares on the observed entries."""
    values, mask = _check(values, mask)
    if rank < 1:
        raise ValueError("rank must be at least 1")
    if mask.sum() == 0:
        raise ValueError("nothing is observed")
    n, t = values.shape
    if mask.sum() < rank * (n + t):
        log.warning("only %d observed entries for %d factor unknowns", int(mask.sum()), rank * (n + t))
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, 0.1, (n, rank))
    Vf = rng.normal(0.0, 0.1, (t, rank))
    for attempt in range(4):
        try:
            state = MFState(U.copy(), Vf.copy(), ridge)
            for _ in range(iterations):
                state.U = _ridge_rows(values, mask, state.Vf, ridge)
                state.objective.append(_objective(values, mask, state.U, state.Vf, ridge))
                state.Vf = _ridge_rows(values.T, mask.T, state.U, ridge)
                state.objective.append(_objective(values, mask, state.U, state.Vf, ridge))
            return state
        except np.linalg.LinAlgError:
            if attempt == 3:
                raise
            ridge *= 10.0
            log.warning("singular normal equations; retrying with ridge %g", ridge)
    raise AssertionError("unreachable")


def mf_impute(values: np.ndarray, mask: np.ndarray, rank: int = 10, iterations: int = 50,
              ridge: float = 1e-3, seed: int = 0) -> np.ndarray:
    values, mask = _check(values, mask)
    state = mf_fit(values, mask, rank, iterations, ridge, seed)
    return np.where(mask > 0, values, np.clip(state.reconstruction(), 0.0, 1.0))


# --------------------------------------------------------------------------- univariate RNN

def univariate_config(bidirectional: bool = True, d: int = 16, enc_hidden: int = 32,
                      dec_hidden: int = 64) -> ModelConfig:
    """The model with no edges, no embeddings and a single median output."""
    return ModelConfig(d=d, q=0, r=0, enc_hidden=enc_hidden, dec_hidden=dec_hidden,
                       quantiles=[0.5], use_graph=False, bidirectional=bidirectional)


def univariate_cell_step(h_prev: Tensor, z: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    """Per-node gated cell; a graph cell whose neighbours all vanish."""
    def gate(o, h, g):
        zero = np.zeros(h.shape)
        return ops.add(mlp(ops.concat([h, zero], axis=-1), p[f"{g}/upd/W1"], p[f"{g}/upd/b1"],
                           p[f"{g}/upd/W2"], p[f"{g}/upd/b2"]),
                       ops.matmul(o, p[f"{g}/skip/W"]))

    o = ops.concat([z, h_prev], axis=-1)
    r = ops.sigmoid(gate(o, h_prev, f"{prefix}/r"))
    u = ops.sigmoid(gate(o, h_prev, f"{prefix}/u"))
    rh = ops.mul(r, h_prev)
    c = ops.tanh(gate(ops.concat([z, rh], axis=-1), rh, f"{prefix}/c"))
    return ops.add(ops.mul(u, h_prev), ops.mul(ops.sub(1.0, u), c))


def train_univariate(patients: list[Patient], config: TrainConfig, bidirectional: bool = True,
                     model_config: ModelConfig | None = None, validation=None, log=None) -> TrainResult:
    """Inductive training; with the single 0.5 quantile the pinball loss is MAE / 2."""
    mc = model_config or univariate_config(bidirectional)
    if mc.use_graph or mc.q or mc.r or mc.quantiles != [0.5]:
        raise ValueError("univariate baseline needs no graph, no embeddings and C = {0.5}")
    return train_model(patients, mc, config, validation=validation, log=log)


def empty_embeddings(n_nodes: int) -> PatientEmbeddings:
    return PatientEmbeddings(Tensor(np.zeros((n_nodes, 0))), Tensor(np.zeros(0)))


def rnn_impute(result: TrainResult, mesh, values: np.ndarray, mask: np.ndarray,
               window: int = 20) -> np.ndarray:
    """Apply a trained univariate model to an unseen recording."""
    values, mask = _check(values, mask)
    q = predict_quantiles(result.params, empty_embeddings(values.shape[0]), mesh, values, mask,
                          result.config, window)
    return np.where(mask > 0, values, q[..., 0])
