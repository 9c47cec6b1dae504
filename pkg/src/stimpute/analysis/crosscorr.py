"""Comparison of non-contemporaneous recordings.

Rigid registration (ICP), k-NN projection between meshes, sliding-window
phase cross-correlation and bootstrap confidence intervals on percentiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class AlignmentError(ValueError):
    pass


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    rms_history: list[float]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def rms(self) -> float:
        return self.rms_history[-1]


def _check_spread(points: np.ndarray, name: str) -> None:
    if points.shape[0] < 3:
        raise AlignmentError(f"{name}: need at least 3 points")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise AlignmentError(f"{name}: points are collinear")


def kabsch(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation taking ``p`` onto ``q``."""
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    u, _, vt = np.linalg.svd((p - pc).T @ (q - qc))
    s = np.eye(3)
    s[2, 2] = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ s @ u.T
    return rot, qc - rot @ pc


def _principal_axes(points: np.ndarray) -> np.ndarray:
    _, vecs = np.linalg.eigh(points.T @ points)
    return vecs[:, ::-1]


def _initial_rotations(src: np.ndarray, tgt: np.ndarray) -> list[np.ndarray]:
    """Identity plus the four proper rotations matching principal axes (sign ambiguity)."""
    a, b = _principal_axes(src), _principal_axes(tgt)
    out = [np.eye(3)]
    for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        flip = np.diag([sx, sy, 1.0])
        rot = b @ flip @ a.T
        if np.linalg.det(rot) < 0:
            rot = b @ np.diag([sx, sy, -1.0]) @ a.T
        out.append(rot)
    return out


def _icp_from(src, tgt, tree, start, max_iter, tol):
    d, idx = tree.query(src @ start.T)
    history = [float(np.sqrt(np.mean(d ** 2)))]
    rot, trans = start, np.zeros(3)
    for _ in range(max_iter):
        rot, trans = kabsch(src, tgt[idx])
        d, idx = tree.query(src @ rot.T + trans)
        history.append(float(np.sqrt(np.mean(d ** 2))))
        if abs(history[-2] - history[-1]) < tol:
            break
    return rot, trans, history


def icp_align(source: np.ndarray, target: np.ndarray, max_iter: int = 50, tol: float = 1e-6,
              centre: bool = True) -> RigidTransform:
    """Point-to-point ICP; both clouds are first centred on the origin when asked.

    ICP is local, so it is started from the identity and from each principal
    axis alignment and the run with the lowest final RMS wins. The returned
    transform maps the original ``source`` coordinates into the frame of the
    original ``target``.
    """
    source = np.asarray(source, float)
    target = np.asarray(target, float)
    _check_spread(source, "source")
    _check_spread(target, "target")
    s0 = source.mean(axis=0) if centre else np.zeros(3)
    t0 = target.mean(axis=0) if centre else np.zeros(3)
    src, tgt = source - s0, target - t0
    tree = cKDTree(tgt)
    runs = [_icp_from(src, tgt, tree, r, max_iter, tol) for r in _initial_rotations(src, tgt)]
    rot, trans, history = min(runs, key=lambda run: run[2][-1])
    # compose: x -> rot (x - s0) + trans + t0
    return RigidTransform(rot, trans + t0 - rot @ s0, history)


def knn_project(source_points: np.ndarray, target_points: np.ndarray, field: np.ndarray,
                k: int = 5) -> np.ndarray:
    """Carry a node x time field to target nodes as the mean of k nearest sources."""
    source_points = np.asarray(source_points, float)
    if k > source_points.shape[0]:
        raise ValueError("k exceeds the number of source nodes")
    _, idx = cKDTree(source_points).query(np.asarray(target_points, float), k=k)
    idx = idx.reshape(len(target_points), k)
    return np.asarray(field, float)[idx].mean(axis=1)


def window_starts(n_frames: int, length: int, stride: int) -> np.ndarray:
    if length > n_frames:
        raise ValueError("window longer than the recording")
    return np.arange(0, n_frames - length + 1, stride)


def _standardised_windows(phase: np.ndarray, length: int, stride: int):
    starts = window_starts(phase.shape[1], length, stride)
    win = np.stack([phase[:, s:s + length].ravel() for s in starts])
    win = win - win.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(win, axis=1)
    flat = norm <= 1e-12
    win[~flat] /= norm[~flat, None]
    win[flat] = 0.0
    return win, flat


@dataclass
class CrossCorrelation:
    matrix: np.ndarray  # windows of A x windows of B
    flat_windows: int  # zero-variance windows (their correlations are 0)

    @property
    def values(self) -> np.ndarray:
        return self.matrix.ravel()


def sliding_cross_corr(phase_a: np.ndarray, phase_b: np.ndarray, window_seconds: float,
                       sampling_rate: float, stride_seconds: float = 0.1) -> CrossCorrelation:
    """Pearson correlation between every window of A and every window of B."""
    if not 0.5 <= window_seconds <= 4.0:
        raise ValueError("window length must lie in [0.5, 4.0] s")
    if phase_a.shape[0] != phase_b.shape[0]:
        raise ValueError("recordings must share a mesh (project them first)")
    length = int(round(window_seconds * sampling_rate))
    stride = max(1, int(round(stride_seconds * sampling_rate)))
    wa, fa = _standardised_windows(np.asarray(phase_a, float), length, stride)
    wb, fb = _standardised_windows(np.asarray(phase_b, float), length, stride)
    mat = np.clip(wa @ wb.T, -1.0, 1.0)
    return CrossCorrelation(mat, int(fa.sum() + fb.sum()))


def spatiotemporal_shuffle(field: np.ndarray, seed: int = 0) -> np.ndarray:
    """Random permutation of all (node, frame) entries."""
    rng = np.random.default_rng(seed)
    flat = np.asarray(field).ravel()
    return flat[rng.permutation(flat.size)].reshape(np.shape(field))


def bootstrap_percentile_ci(samples: np.ndarray, percentile: float = 99.0, rounds: int = 1000,
                            resample_size: int = 10000, seed: int = 0) -> tuple[float, float, float]:
    """Point percentile and its 95% bootstrap interval (2.5 and 97.5 percentiles)."""
    x = np.asarray(samples, float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    rng = np.random.default_rng(seed)
    point = float(np.percentile(x, percentile))
    boots = np.empty(rounds)
    for r in range(rounds):
        boots[r] = np.percentile(x[rng.integers(0, x.size, resample_size)], percentile)
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return point, float(min(lo, point)), float(max(hi, point))
