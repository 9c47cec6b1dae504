"""Synthetic ground truth, resampling, normalisation and the cohort split."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.signal import butter, sosfiltfilt
from scipy.stats import ks_2samp

from . import diffcore
from .geometry import MeshGraph, kmeans, nearest_source_cells, subdivide


class NormalisationError(ValueError):
    pass


class IntegrationError(ArithmeticError):
    def __init__(self, message: str, frame: int):
        super().__init__(message)
        self.frame = frame


@dataclass
class FieldSeries:
    values: np.ndarray  # N x T
    mask: np.ndarray  # N x T, 1 = observed
    sampling_rate: float
    normalisation: tuple[float, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.mask is None:
            self.mask = np.ones_like(self.values)
        self.mask = np.asarray(self.mask, dtype=float)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise ValueError("values and mask must be N x T with equal dims")
        if not self.sampling_rate > 0:
            raise ValueError("sampling rate must be positive")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def replace(self, **kw) -> "FieldSeries":
        base = dict(values=self.values, mask=self.mask, sampling_rate=self.sampling_rate,
                    normalisation=self.normalisation, meta=dict(self.meta))
        base.update(kw)
        return FieldSeries(**base)


# --------------------------------------------------------------------------- spiral

def generate_spiral(mesh: MeshGraph, omega: float, frames: int, sampling_rate: float,
                    core_vertex: int, kappa: float = 1.0) -> FieldSeries:
    """Rigidly rotating analytic spiral (1 + cos(theta - omega t + kappa d)) / 2.

    theta is the azimuth about the axis through ``core_vertex`` and d the angle
    from that axis, both measured about the mesh centroid.
    """
    if not 0 <= core_vertex < mesh.n_nodes:
        raise IndexError("core vertex out of range")
    centre = mesh.vertices.mean(axis=0)
    p = mesh.vertices - centre
    axis = p[core_vertex] / np.linalg.norm(p[core_vertex])
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    theta = np.arctan2(p @ e2, p @ e1)
    r = np.linalg.norm(p, axis=1)
    d = np.arccos(np.clip((p @ axis) / np.maximum(r, 1e-12), -1.0, 1.0))
    theta[core_vertex] = 0.0
    t = np.arange(frames) / sampling_rate
    values = 0.5 * (1.0 + np.cos(theta[:, None] - omega * t[None, :] + kappa * d[:, None]))
    meta = {"generator": "spiral", "omega": omega, "core_vertex": int(core_vertex),
            "kappa": kappa, "degenerate": omega == 0}
    return FieldSeries(values, np.ones_like(values), sampling_rate, None, meta)


# --------------------------------------------------------------------------- FHN

def graph_laplacian(mesh: MeshGraph) -> sp.csr_matrix:
    a = mesh.adjacency()
    return (sp.diags(np.asarray(a.sum(axis=1)).ravel()) - a).tocsr()


def resting_state(beta: float, gamma: float) -> tuple[float, float]:
    """Real fixed point of the uncoupled FitzHugh-Nagumo unit."""
    # v - v^3/3 - (v + beta)/gamma = 0
    roots = np.roots([-1.0 / 3.0, 0.0, 1.0 - 1.0 / gamma, -beta / gamma])
    real = roots[np.abs(roots.imag) < 1e-9].real
    v = float(real.min())
    return v, (v + beta) / gamma


def fhn_step(v, w, lap, D, eps, beta, gamma, dt, reaction: bool = True):
    """One explicit Euler step; ``reaction=False`` leaves pure diffusion."""
    dv = -D * (lap @ v)
    if reaction:
        dv = dv + v - v ** 3 / 3.0 - w
        dw = eps * (v + beta - gamma * w)
        return v + dt * dv, w + dt * dw
    return v + dt * dv, w


@dataclass
class FHNConfig:
    D: float = 0.1
    eps: float = 0.05
    beta: float = 0.7
    gamma: float = 0.8
    dt: float = 0.02
    refine: int = 1  # midpoint subdivisions of the output mesh used for integration
    units_per_second: float = 420.0
    record_rate: float = 280.0
    warmup: float = 300.0  # model-time units discarded before recording
    protocol: str = "cross-field"  # or "none"
    noise: float = 0.01

    def to_json(self) -> dict:
        return dict(self.__dict__)


def random_frame(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random rotation (rows: stimulus axis, erase normal, third)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    return q.T


def generate_fhn(mesh: MeshGraph, frames: int, sampling_rate: float = 70.0,
                 config: FHNConfig | None = None, seed: int = 0,
                 frame: np.ndarray | None = None, offset: float = 0.0) -> FieldSeries:
    """FitzHugh-Nagumo recording on ``mesh``, min-max normalised.

    Integration runs on a ``refine``-times subdivided copy of the mesh and each
    output node averages its hop-nearest cell. The cross-field protocol excites
    a cap around the stimulus axis, then erases the half-space behind the erase
    normal once the front reaches the equator, leaving free wave ends that curl
    into a pair of counter-rotating spirals. ``offset`` shifts the recording
    start by that many seconds.
    """
    cfg = config or FHNConfig()
    rng = np.random.default_rng(seed)
    basis = random_frame(rng) if frame is None else np.asarray(frame, float)
    sim = subdivide(mesh, cfg.refine) if cfg.refine > 0 else mesh
    lap = graph_laplacian(sim)
    # Gershgorin bound on the Laplacian spectrum
    lam_max = float(np.asarray(abs(lap).sum(axis=1)).max()) if sim.n_nodes > 1 else 0.0
    if cfg.dt * cfg.D * lam_max >= 1.0:
        raise ValueError("dt * D * lambda_max must stay below 1 for explicit stability")
    stride = cfg.units_per_second / (cfg.record_rate * cfg.dt)
    if abs(stride - round(stride)) > 1e-9:
        raise ValueError("units_per_second / (record_rate * dt) must be an integer")
    stride = int(round(stride))

    v0, w0 = resting_state(cfg.beta, cfg.gamma)
    v = np.full(sim.n_nodes, v0) + cfg.noise * rng.uniform(-1, 1, sim.n_nodes)
    w = np.full(sim.n_nodes, w0)
    p = sim.vertices - sim.vertices.mean(axis=0)
    along = p @ basis[0]
    reach = np.abs(along).max() if sim.n_nodes > 1 else 1.0
    band = np.abs(along) < 0.05 * reach
    erased = p @ basis[1] < 0.0
    armed = cfg.protocol == "cross-field"
    if armed:
        v[along > 0.9 * reach] = 1.8

    ratio = cfg.record_rate / sampling_rate
    n_record = int(np.ceil(frames * ratio)) + 1
    start = int(round((cfg.warmup + offset * cfg.units_per_second) / cfg.dt))
    total = start + n_record * stride
    rec = np.empty((sim.n_nodes, n_record))
    k_rec = 0
    for k in range(total):
        v, w = fhn_step(v, w, lap, cfg.D, cfg.eps, cfg.beta, cfg.gamma, cfg.dt)
        if armed and band.any() and (v[band] > 0).any():
            v[erased], w[erased] = v0, w0
            armed = False
        if k >= start and (k - start) % stride == 0:
            if not np.all(np.abs(v) <= 10.0):
                raise IntegrationError("FHN integration diverged", k_rec)
            rec[:, k_rec] = v
            k_rec += 1

    if cfg.refine > 0:
        cells = nearest_source_cells(sim, np.arange(mesh.n_nodes))
        counts = np.bincount(cells, minlength=mesh.n_nodes).astype(float)
        member = sp.csr_matrix((np.ones(sim.n_nodes), (cells, np.arange(sim.n_nodes))),
                               shape=(mesh.n_nodes, sim.n_nodes))
        rec = np.asarray(member @ rec) / counts[:, None]
    meta = {"generator": "fhn", "seed": int(seed), "config": cfg.to_json(),
            "frame": basis.tolist(), "offset": offset}
    series = FieldSeries(rec, None, cfg.record_rate, None, meta)
    series = temporal_resample(series, sampling_rate)
    series = series.replace(values=series.values[:, :frames], mask=series.mask[:, :frames])
    return min_max_normalize(series)


# --------------------------------------------------------------------------- resampling

def temporal_resample(series: FieldSeries, target_rate: float) -> FieldSeries:
    """Zero-phase 4th-order Butterworth low-pass at target/2, then decimate.

    Integer rate ratios keep every r-th frame; other ratios interpolate
    linearly onto the new time grid after filtering.
    """
    rate = series.sampling_rate
    if target_rate > rate * (1 + 1e-12):
        raise ValueError("target rate must not exceed the sampling rate")
    if np.isclose(target_rate, rate, rtol=1e-12):
        return series.replace(sampling_rate=rate)
    sos = butter(4, target_rate / rate, btype="low", output="sos")
    x = series.values
    filtered = sosfiltfilt(sos, x, axis=1) if x.shape[1] > 27 else x.copy()
    ratio = Fraction(rate / target_rate).limit_denominator(10 ** 6)
    if ratio.denominator == 1:
        r = ratio.numerator
        values, mask = filtered[:, ::r], series.mask[:, ::r]
    else:
        t_old = np.arange(x.shape[1]) / rate
        t_new = np.arange(int(np.floor(t_old[-1] * target_rate)) + 1) / target_rate
        values = np.stack([np.interp(t_new, t_old, row) for row in filtered])
        idx = np.minimum(np.round(t_new * rate).astype(int), x.shape[1] - 1)
        mask = series.mask[:, idx]
    return series.replace(values=values, mask=mask, sampling_rate=target_rate)


def min_max_normalize(series: FieldSeries) -> FieldSeries:
    """Global (all nodes, all frames) min-max scaling to [0, 1]."""
    lo, hi = float(series.values.min()), float(series.values.max())
    if not hi > lo:
        raise NormalisationError("constant field cannot be normalised")
    return series.replace(values=(series.values - lo) / (hi - lo), normalisation=(lo, hi))


def denormalize(values: np.ndarray, normalisation: tuple[float, float]) -> np.ndarray:
    lo, hi = normalisation
    return np.asarray(values) * (hi - lo) + lo


# --------------------------------------------------------------------------- entropy / split

def shannon_entropy(signal: np.ndarray, bins: int = 64) -> float:
    """Histogram entropy in bits over ``bins`` equal bins on [0, 1]."""
    x = np.clip(np.asarray(signal, float).ravel(), 0.0, 1.0)
    if x.size < 2:
        raise ValueError("entropy needs at least 2 samples")
    counts, _ = np.histogram(x, bins=bins, range=(0.0, 1.0))
    p = counts[counts > 0] / x.size
    return float(max(0.0, -(p * np.log2(p)).sum()))


def node_entropies(series: FieldSeries, bins: int = 64) -> np.ndarray:
    return np.array([shannon_entropy(row, bins) for row in series.values])


def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm distance between the empirical CDFs of two samples."""
    return float(ks_2samp(np.ravel(a), np.ravel(b)).statistic)


@dataclass
class CohortSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    labels: list[int]
    entropies: list[list[float]]

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "CohortSplit":
        return cls(**{k: obj[k] for k in ("train", "validation", "test", "labels", "entropies")})


def laplacian_eigenmap(dist: np.ndarray, threshold: float = 0.3, sigma: float | None = None,
                       dims: int = 4) -> np.ndarray:
    """Embedding from the generalised problem L y = lambda D y on an RBF graph."""
    n = dist.shape[0]
    off = dist[~np.eye(n, dtype=bool)]
    if sigma is None:
        sigma = float(np.median(off)) if off.size else 1.0
    sigma = sigma if sigma > 0 else 1.0
    w = np.exp(-dist ** 2 / (2.0 * sigma ** 2))
    w[w <= threshold] = 0.0
    deg = w.sum(axis=1)
    vals, vecs = eigh(np.diag(deg) - w, np.diag(deg))
    # the constant vector is kept: with disconnected groups the null space
    # basis is arbitrary and dropping a column can lose the separation
    keep = min(dims, n - 1) + 1 if n > 1 else 1
    # one-step diffusion scaling: columns near lambda = 1 carry within-group
    # noise and would otherwise weigh as much as the separating ones
    return vecs[:, :keep] * np.abs(1.0 - vals[:keep])


def elbow_clusters(points: np.ndarray, seed: int, k_max: int = 8) -> np.ndarray:
    n = points.shape[0]
    distinct = np.unique(np.round(points, 12), axis=0).shape[0]
    top = min(k_max, distinct - 1)
    inertia = {k: kmeans(points, k, seed)[2] for k in range(1, top + 2) if k <= distinct}
    scale = max(inertia[1], 1e-300)
    if top < 2 or inertia[1] <= 1e-12 or (inertia[1] - inertia.get(2, 0.0)) / scale < 1e-6:
        return np.zeros(n, dtype=int)
    best = max(range(2, top + 1), key=lambda k: inertia[k - 1] - 2 * inertia[k] + inertia[k + 1])
    return kmeans(points, best, seed)[0]


def merge_small_clusters(labels: np.ndarray, points: np.ndarray, minimum: int = 3) -> np.ndarray:
    labels = labels.copy()
    while True:
        ids, counts = np.unique(labels, return_counts=True)
        small = ids[counts < minimum]
        if small.size == 0 or ids.size == 1:
            break
        c = small[np.argmin(counts[np.isin(ids, small)])]
        cents = {i: points[labels == i].mean(axis=0) for i in ids}
        target = min((i for i in ids if i != c), key=lambda i: np.linalg.norm(cents[i] - cents[c]))
        labels[labels == c] = target
    _, labels = np.unique(labels, return_inverse=True)
    return labels


def allocate(size: int, fractions: tuple[float, ...]) -> list[int]:
    """Largest-remainder split of ``size``; every part gets >= 1 when size >= 3."""
    raw = np.array(fractions) * size
    out = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - out), kind="stable")[: size - out.sum()]:
        out[i] += 1
    if size >= len(fractions):
        for i in range(len(out)):
            while out[i] == 0:
                out[int(np.argmax(out))] -= 1
                out[i] += 1
    return out.tolist()


def stratified_split(patients: list[FieldSeries], fractions=(0.7, 0.1, 0.2), sigma=None,
                     threshold: float = 0.3, seed: int = 0, bins: int = 64) -> CohortSplit:
    n = len(patients)
    if n < 5:
        raise ValueError("stratified split needs at least 5 patients")
    ent = [node_entropies(p, bins) for p in patients]
    dist = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            dist[a, b] = dist[b, a] = ks_distance(ent[a], ent[b])
    emb = laplacian_eigenmap(dist, threshold, sigma)
    labels = merge_small_clusters(elbow_clusters(emb, seed), emb)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c)).tolist()
        sizes = allocate(len(members), fractions)
        at = 0
        for s, size in enumerate(sizes):
            parts[s] += members[at:at + size]
            at += size
    return CohortSplit(sorted(parts[0]), sorted(parts[1]), sorted(parts[2]),
                       labels.astype(int).tolist(), [e.tolist() for e in ent])


# --------------------------------------------------------------------------- cohort

# Two parameter regimes with different rotation periods and wave widths.
REGIMES = {
    "slow": FHNConfig(D=0.1, eps=0.04),
    "fast": FHNConfig(D=0.15, eps=0.05),
}


def generate_cohort(mesh: MeshGraph, n_patients: int, seconds: float = 10.0,
                    sampling_rate: float = 70.0, seed: int = 0,
                    regimes: dict[str, FHNConfig] | None = None, jobs: int = 1) -> list[FieldSeries]:
    """Patients alternate over the regimes; each gets its own random stimulus frame.

    Patients are independent, so ``jobs > 1`` simulates them in worker
    processes with identical results.
    """
    regimes = regimes or REGIMES
    names = sorted(regimes)
    frames = int(round(seconds * sampling_rate))
    seeds = np.random.SeedSequence(seed).generate_state(n_patients)
    tasks = [(mesh, frames, sampling_rate, regimes[names[p % len(names)]], int(seeds[p]))
             for p in range(n_patients)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            out = list(pool.map(_fhn_task, tasks))
    else:
        out = [_fhn_task(t) for t in tasks]
    for p, s in enumerate(out):
        s.meta.update({"regime": names[p % len(names)], "patient": p})
    return out


def _fhn_task(args) -> FieldSeries:
    return generate_fhn(*args)


# --------------------------------------------------------------------------- bundles

def save_bundle(path, mesh: MeshGraph, series: FieldSeries) -> None:
    """Write mesh.json, values.sti, mask.sti and meta.json into ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    mesh.save(d / "mesh.json")
    diffcore.save(d / "values.sti", series.values)
    diffcore.save(d / "mask.sti", series.mask)
    meta = {"sampling_rate": series.sampling_rate,
            "normalisation": list(series.normalisation) if series.normalisation else None,
            "meta": series.meta}
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_bundle(path) -> tuple[MeshGraph, FieldSeries]:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    norm = tuple(meta["normalisation"]) if meta.get("normalisation") else None
    series = FieldSeries(diffcore.load(d / "values.sti"), diffcore.load(d / "mask.sti"),
                         meta["sampling_rate"], norm, meta.get("meta", {}))
    return MeshGraph.load(d / "mesh.json"), series
