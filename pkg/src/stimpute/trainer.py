"""Self-supervised training over random catheter walks and embedding-only fine-tuning."""

from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Tensor, backward, finite_checks, no_grad, ops
from .geometry import (ConfigurationError, MeshGraph, make_patches, patch_count, sample_walk,
                       walk_to_mask)
from .model import (GraphBatch, ModelConfig, PatientEmbeddings, combined_loss, forward,
                    init_embeddings, init_shared, parameter_count)

AREA_BOUNDS = (0.025, 0.5)
DWELL_BOUNDS = (0.2, 4.0)
OVERLAP_BOUNDS = (0, 3)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, iteration: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, iteration {iteration}")
        self.epoch, self.iteration = epoch, iteration


@dataclass
class Patient:
    pid: str
    mesh: MeshGraph
    values: np.ndarray  # N x T ground truth, normalised
    sampling_rate: float = 70.0

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _strict(cls, obj: dict):
    unknown = set(obj) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class TrainConfig:
    batch_size: int = 16
    window: int = 20
    stride: int = 1
    epochs: int = 20
    iterations_per_epoch: int = 50
    learning_rate: float = 3e-3
    min_learning_rate: float = 1e-5
    scheduler: str = "cosine"  # or "constant"
    area_range: tuple[float, float] = AREA_BOUNDS
    dwell_range: tuple[float, float] = DWELL_BOUNDS
    overlap_range: tuple[int, int] = OVERLAP_BOUNDS
    patience: int = 10
    validation_frames: int = 210
    time_budget: float | None = None  # seconds
    seed: int = 0

    def __post_init__(self):
        self.area_range = tuple(self.area_range)
        self.dwell_range = tuple(self.dwell_range)
        self.overlap_range = tuple(int(o) for o in self.overlap_range)
        if self.batch_size < 1 or self.window < 2 or self.stride < 1:
            raise ValueError("batch size >= 1, window >= 2 and stride >= 1 are required")
        lo, hi = self.area_range
        if not (AREA_BOUNDS[0] <= lo <= hi <= AREA_BOUNDS[1] or lo == hi == 1.0):
            raise ValueError("area range must lie within [0.025, 0.5]")
        lo, hi = self.dwell_range
        if not DWELL_BOUNDS[0] <= lo <= hi <= DWELL_BOUNDS[1]:
            raise ValueError("dwell range must lie within [0.2, 4] s")
        lo, hi = self.overlap_range
        if not OVERLAP_BOUNDS[0] <= lo <= hi <= OVERLAP_BOUNDS[1]:
            raise ValueError("overlap range must lie within {0..3}")
        if self.scheduler not in ("cosine", "constant"):
            raise ValueError("scheduler must be 'cosine' or 'constant'")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return _strict(cls, obj)


@dataclass
class FineTuneConfig:
    learning_rate: float = 0.005
    batch_size: int = 16
    window: int = 20
    patience: int = 10
    max_epochs: int = 30
    iterations_per_epoch: int = 10
    time_budget: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "FineTuneConfig":
        return _strict(cls, obj)


# --------------------------------------------------------------------------- masks

@dataclass
class WalkSpec:
    area: float
    dwell: float
    overlap: int


def draw_walk_spec(config: TrainConfig, rng: np.random.Generator) -> WalkSpec:
    return WalkSpec(float(rng.uniform(*config.area_range)), float(rng.uniform(*config.dwell_range)),
                    int(rng.integers(config.overlap_range[0], config.overlap_range[1] + 1)))


def walk_mask(mesh: MeshGraph, frames: int, rate: float, spec: WalkSpec, seed: int,
              fixed: bool = False) -> np.ndarray:
    if spec.area >= 1.0 or patch_count(spec.area) <= 1:
        return np.ones((mesh.n_nodes, frames))
    patches = make_patches(mesh, spec.area, spec.overlap, seed)
    plan = sample_walk(patches, frames, spec.dwell, rate, seed, fixed=fixed)
    return walk_to_mask(plan, mesh.n_nodes, frames)


def sample_training_mask(patient: Patient, config: TrainConfig, seed: int) -> tuple[np.ndarray, WalkSpec]:
    """Random walk mask with (area, dwell, overlap) drawn uniformly from the ranges."""
    rng = np.random.default_rng(seed)
    spec = draw_walk_spec(config, rng)
    return walk_mask(patient.mesh, patient.n_frames, patient.sampling_rate, spec,
                     int(rng.integers(2 ** 31)), fixed=False), spec


def evaluation_mask(patient: Patient, area: float = 0.1, dwell: float = 1.0, overlap: int = 0,
                    seed: int = 0) -> np.ndarray:
    """Fixed self-avoiding walk used for validation and test scoring."""
    return walk_mask(patient.mesh, patient.n_frames, patient.sampling_rate,
                     WalkSpec(area, dwell, overlap), seed, fixed=True)


# --------------------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: dict[int, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(id(p))
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------- batching

class GraphCache:
    def __init__(self, use_graph: bool):
        self.use_graph = use_graph
        self._cache: dict[tuple, GraphBatch] = {}

    def get(self, meshes: list[MeshGraph]) -> GraphBatch:
        key = tuple(id(m) for m in meshes)
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = GraphBatch.from_meshes(meshes, self.use_graph)
        return self._cache[key]


def collate(items: list[tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Stack (values, mask, eval mask) node x W windows into (W, sum N) arrays."""
    X = np.concatenate([v.T for v, _, _ in items], axis=1)
    M = np.concatenate([m.T for _, m, _ in items], axis=1)
    E = np.concatenate([e.T for _, _, e in items], axis=1)
    return X, M, E


def window_starts(n_frames: int, window: int, stride: int) -> np.ndarray:
    if window > n_frames:
        raise ConfigurationError("window longer than the recording")
    return np.arange(0, n_frames - window + 1, stride)


# --------------------------------------------------------------------------- inference

def predict_quantiles(params: dict[str, Tensor], emb: PatientEmbeddings, mesh: MeshGraph,
                      values: np.ndarray, mask: np.ndarray, config: ModelConfig, window: int = 20,
                      stride: int | None = None, batch_size: int = 16,
                      graphs: GraphCache | None = None) -> np.ndarray:
    """Full-recording N x T x |C| predictions from stitched overlapping windows.

    Windows start every ``stride`` frames (default window // 2) plus one final
    window flush with the end; overlapping predictions are averaged.
    """
    values = np.asarray(values, float) * mask
    n, t = values.shape
    window = min(window, t)
    stride = stride or max(1, window // 2)
    starts = list(range(0, t - window + 1, stride))
    if starts[-1] != t - window:
        starts.append(t - window)
    graphs = graphs or GraphCache(config.use_graph)
    acc = np.zeros((n, t, config.n_quantiles))
    hits = np.zeros((1, t, 1))
    with no_grad(), finite_checks(False):
        for b in range(0, len(starts), batch_size):
            chunk = starts[b:b + batch_size]
            graph = graphs.get([mesh] * len(chunk))
            X = np.concatenate([values[:, s:s + window].T for s in chunk], axis=1)
            M = np.concatenate([mask[:, s:s + window].T for s in chunk], axis=1)
            out = forward(params, [emb] * len(chunk), graph, X, M, config)
            Y = out.Y.data  # (W, len*N, C)
            for j, s in enumerate(chunk):
                acc[:, s:s + window] += np.transpose(Y[:, j * n:(j + 1) * n], (1, 0, 2))
                hits[:, s:s + window] += 1
    return acc / hits


def point_imputation(quantiles: np.ndarray, values: np.ndarray, mask: np.ndarray,
                     config: ModelConfig) -> np.ndarray:
    """Median channel with observed entries copied from the observations."""
    med = quantiles[..., config.median_index]
    return np.where(np.asarray(mask) > 0, values, med)


def mean_embeddings(config: ModelConfig, embeddings: dict[str, PatientEmbeddings],
                    n_nodes: int) -> PatientEmbeddings:
    """Average of the training embeddings (zeros when node counts differ)."""
    same = [e for e in embeddings.values() if e.n_nodes == n_nodes]
    V = np.mean([e.V.data for e in same], axis=0) if same else np.zeros((n_nodes, config.q))
    g = np.mean([e.g.data for e in embeddings.values()], axis=0) if embeddings else np.zeros(config.r)
    return PatientEmbeddings(Tensor(V.copy(), requires_grad=True, name="emb/V"),
                             Tensor(np.asarray(g, float).copy(), requires_grad=True, name="emb/g"))


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    config: ModelConfig
    params: dict[str, Tensor]
    embeddings: dict[str, PatientEmbeddings]
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def history_csv(self) -> str:
        buf = io.StringIO()
        # wall-clock seconds stay out of the file so reruns are byte-identical
        w = csv.DictWriter(buf, fieldnames=["epoch", "train_loss", "val_mae", "lr"],
                           lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(self.history)
        return buf.getvalue()


def _snapshot(params: dict[str, Tensor], embeddings: dict[str, PatientEmbeddings]):
    return ({k: v.data.copy() for k, v in params.items()},
            {k: (e.V.data.copy(), e.g.data.copy()) for k, e in embeddings.items()})


def _restore(snap, params, embeddings) -> None:
    ps, es = snap
    for k, v in ps.items():
        params[k].data[...] = v
    for k, (V, g) in es.items():
        embeddings[k].V.data[...] = V
        embeddings[k].g.data[...] = g


def validation_mae(params, embeddings, patients: list[Patient], config: ModelConfig,
                   window: int, frames: int | None = None, graphs: GraphCache | None = None) -> float:
    """Remaining-field MAE under the fixed 10% / 1 s / 0-overlap walk."""
    errs, counts = 0.0, 0.0
    for p in patients:
        emb = embeddings.get(p.pid) or mean_embeddings(config, embeddings, p.n_nodes)
        vals = p.values if frames is None else p.values[:, :frames]
        sub = Patient(p.pid, p.mesh, vals, p.sampling_rate)
        mask = evaluation_mask(sub)
        q = predict_quantiles(params, emb, p.mesh, vals, mask, config, window, graphs=graphs)
        hidden = mask == 0
        if hidden.any():
            errs += np.abs(q[..., config.median_index] - vals)[hidden].sum()
            counts += hidden.sum()
    return float(errs / counts) if counts else float("nan")


def train_model(patients: list[Patient], model_config: ModelConfig, config: TrainConfig,
                validation: list[Patient] | None = None, params: dict[str, Tensor] | None = None,
                log=None) -> TrainResult:
    """Minimise the combined loss with a whole-field (all-ones) evaluation mask."""
    if not patients:
        raise ValueError("training needs at least one patient")
    rng = np.random.default_rng(config.seed)
    params = params or init_shared(model_config, int(rng.integers(2 ** 31)))
    embeddings = {p.pid: init_embeddings(model_config, p.n_nodes, int(rng.integers(2 ** 31)))
                  for p in patients}
    trainable = list(params.values()) + [t for e in embeddings.values() for t in e.tensors()]
    opt = Adam(trainable, config.learning_rate)
    graphs = GraphCache(model_config.use_graph)
    pairs = [(i, s) for i, p in enumerate(patients)
             for s in window_starts(p.n_frames, config.window, config.stride)]
    total_steps = config.epochs * config.iterations_per_epoch
    result = TrainResult(model_config, params, embeddings)
    best, best_snap, stale = math.inf, None, 0
    started = time.monotonic()
    step = 0
    for epoch in range(config.epochs):
        masks = [sample_training_mask(p, config, int(rng.integers(2 ** 31)))[0] for p in patients]
        losses = []
        lr = config.learning_rate
        for it in range(config.iterations_per_epoch):
            pick = rng.integers(len(pairs), size=config.batch_size)
            items, embs, meshes = [], [], []
            for k in pick:
                i, s = pairs[k]
                p = patients[i]
                sl = slice(s, s + config.window)
                items.append((p.values[:, sl], masks[i][:, sl], np.ones((p.n_nodes, config.window))))
                embs.append(embeddings[p.pid])
                meshes.append(p.mesh)
            X, M, E = collate(items)
            if config.scheduler == "cosine":
                lr = cosine_lr(step, total_steps, config.learning_rate, config.min_learning_rate)
            with finite_checks(False):
                out = forward(params, embs, graphs.get(meshes), X, M, model_config)
                loss = combined_loss(out, X, E, model_config)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(epoch, it)
                grads = backward(loss, trainable)
            opt.step(grads, lr)
            losses.append(loss.item())
            step += 1
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mae": "",
               "lr": lr, "seconds": round(time.monotonic() - started, 1)}
        monitored = row["train_loss"]
        if validation:
            monitored = validation_mae(params, embeddings, validation, model_config, config.window,
                                       config.validation_frames, graphs)
            row["val_mae"] = monitored
        result.history.append(row)
        if log:
            log(row)
        if monitored < best:
            best, best_snap, stale = monitored, _snapshot(params, embeddings), 0
            result.best_epoch = epoch
        else:
            stale += 1
        if stale >= config.patience:
            break
        if config.time_budget and time.monotonic() - started > config.time_budget:
            break
    if best_snap is not None:
        _restore(best_snap, params, embeddings)
    return result


# --------------------------------------------------------------------------- fine-tuning

@dataclass
class FineTuneResult:
    embeddings: PatientEmbeddings
    quantiles: np.ndarray  # N x T x |C|
    imputed: np.ndarray  # N x T, observed entries copied
    history: list[dict]
    best_epoch: int


def fine_tune(params: dict[str, Tensor], model_config: ModelConfig, mesh: MeshGraph,
              values: np.ndarray, mask: np.ndarray, config: FineTuneConfig,
              embeddings: PatientEmbeddings | None = None, truth: np.ndarray | None = None,
              log=None) -> FineTuneResult:
    """Fit fresh V, g with all shared parameters frozen.

    The loss only sees observed entries (evaluation mask = observation mask),
    and early stopping monitors that same observed-patch loss. When ``truth``
    is given the history also tracks the hidden-entry MAE (diagnostics only).
    """
    mask = np.asarray(mask, float)
    if mask.sum() <= 0:
        raise ValueError("fine-tuning needs at least one observed entry")
    values = np.asarray(values, float) * mask  # never-observed values are unavailable
    rng = np.random.default_rng(config.seed)
    emb = embeddings.copy() if embeddings else init_embeddings(
        model_config, mesh.n_nodes, int(rng.integers(2 ** 31)))
    frozen = {k: Tensor(v.data) for k, v in params.items()}  # shares storage, no grads
    opt = Adam(emb.tensors(), config.learning_rate)
    graphs = GraphCache(model_config.use_graph)
    n, t = values.shape
    window = min(config.window, t)
    starts = window_starts(t, window, 1)
    # windows without any observation carry no signal
    informative = np.array([mask[:, s:s + window].sum() > 0 for s in starts])
    starts = starts[informative]
    hidden = mask == 0

    def monitor(epoch: int) -> dict:
        q = predict_quantiles(frozen, emb, mesh, values, mask, model_config, window, graphs=graphs)
        with no_grad():
            row = {"epoch": epoch, "observed_loss": float(ops.pinball(
                Tensor(q), values, mask, model_config.quantiles).item())}
        if truth is not None and hidden.any():
            row["hidden_mae"] = float(np.abs(q[..., model_config.median_index] - truth)[hidden].mean())
        return row

    history = [monitor(-1)]
    best = history[0]["observed_loss"]
    best_snap = (emb.V.data.copy(), emb.g.data.copy())
    best_epoch, stale = -1, 0
    started = time.monotonic()
    for epoch in range(config.max_epochs):
        for _ in range(config.iterations_per_epoch):
            pick = starts[rng.integers(len(starts), size=config.batch_size)]
            items = [(values[:, s:s + window], mask[:, s:s + window], mask[:, s:s + window])
                     for s in pick]
            X, M, E = collate(items)
            with finite_checks(False):
                out = forward(frozen, [emb] * len(pick), graphs.get([mesh] * len(pick)), X, M,
                              model_config)
                loss = combined_loss(out, X, E, model_config)
                grads = backward(loss, emb.tensors())
            opt.step(grads)
        history.append(monitor(epoch))
        current = history[-1]["observed_loss"]
        if log:
            log(history[-1])
        if current < best:
            best, best_snap, best_epoch, stale = current, (emb.V.data.copy(), emb.g.data.copy()), epoch, 0
        else:
            stale += 1
        if stale >= config.patience:
            break
        if config.time_budget and time.monotonic() - started > config.time_budget:
            break
    emb.V.data[...], emb.g.data[...] = best_snap
    q = predict_quantiles(frozen, emb, mesh, values, mask, model_config, window, graphs=graphs)
    return FineTuneResult(emb, q, point_imputation(q, values, mask, model_config), history, best_epoch)


# --------------------------------------------------------------------------- search

# search space of the published model; the desk defaults sit below it
PUBLISHED_GRID = {
    "batch_size": [16, 32, 64],
    "window": [20, 30, 40, 50],
    "d": [64, 128, 256],
    "q": [16, 32, 64],
    "r": [16, 32, 64],
    "layers": [1, 2, 3],
    "width": [128, 256, 512, 1024],
}
_TRAIN_KEYS = {"batch_size", "window", "learning_rate"}


def expand_grid(grid: dict[str, list], model: ModelConfig | None = None,
                train: TrainConfig | None = None) -> list[tuple[ModelConfig, TrainConfig]]:
    """Cartesian product of ``grid``; "width" sets both MLP hidden widths."""
    model = model or ModelConfig()
    train = train or TrainConfig()
    keys = sorted(grid)
    out = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        m, t = model.to_json(), train.to_json()
        for k, v in zip(keys, combo):
            if k == "width":
                m["enc_hidden"] = m["dec_hidden"] = v
            elif k in _TRAIN_KEYS:
                t[k] = v
            else:
                m[k] = v
        out.append((ModelConfig.from_json(m), TrainConfig.from_json(t)))
    return out


@dataclass
class SearchOutcome:
    best: tuple[ModelConfig, TrainConfig]
    table: list[dict]


def temporal_split(patient: Patient, fractions=(0.85, 0.05, 0.10)) -> tuple[Patient, Patient, Patient]:
    t = patient.n_frames
    a = int(round(fractions[0] * t))
    b = int(round((fractions[0] + fractions[1]) * t))
    cut = [slice(0, a), slice(a, b), slice(b, t)]
    return tuple(Patient(patient.pid, patient.mesh, patient.values[:, c], patient.sampling_rate)
                 for c in cut)


def hyper_search(patients: list[Patient], grid: list[tuple[ModelConfig, TrainConfig]],
                 log=None) -> SearchOutcome:
    """Pick the candidate with the lowest test-segment MAE (ties: fewer parameters).

    Each patient's recording is cut 85/5/10 in time; candidates train on the
    first part, early-stop on the middle part and are scored on the last.
    """
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    if len(grid) == 1:
        return SearchOutcome(grid[0], [])
    splits = [temporal_split(p) for p in patients]
    table = []
    for idx, (mc, tc) in enumerate(grid):
        res = train_model([s[0] for s in splits], mc, tc, validation=[s[1] for s in splits])
        test = [s[2] for s in splits]
        mae = validation_mae(res.params, res.embeddings, test, mc, min(tc.window, test[0].n_frames))
        table.append({"candidate": idx, "test_mae": mae, "parameters": parameter_count(res.params)})
        if log:
            log(table[-1])
    best = min(table, key=lambda r: (r["test_mae"], r["parameters"]))
    return SearchOutcome(grid[best["candidate"]], table)
