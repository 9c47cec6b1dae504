"""Instantaneous phase, phase singularities and their detection rate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert

from ..geometry import MeshGraph

CHARGE_TOL = 0.1


def hilbert_phase(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node analytic-signal phase in (-pi, pi] of an N x T array.

    Returns (phase, flat) where ``flat`` marks constant nodes whose phase is
    defined as 0.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    if x.shape[1] < 8:
        raise ValueError("phase needs at least 8 frames")
    centred = x - x.mean(axis=1, keepdims=True)
    flat = np.abs(centred).max(axis=1) <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=1))
    phase = np.angle(hilbert(centred, axis=1))
    phase[phase <= -np.pi] = np.pi
    phase[flat] = 0.0
    return phase, flat


def wrap(d: np.ndarray) -> np.ndarray:
    """Map angle differences to [-pi, pi)."""
    return (d + np.pi) % (2.0 * np.pi) - np.pi


def face_charges(phase: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Winding number (in turns) of phase around each oriented face, per frame."""
    a, b, c = phase[faces[:, 0]], phase[faces[:, 1]], phase[faces[:, 2]]
    return (wrap(b - a) + wrap(c - b) + wrap(a - c)) / (2.0 * np.pi)


@dataclass
class PhaseSingularityTrack:
    frames: np.ndarray
    faces: np.ndarray
    charges: np.ndarray
    centroids: np.ndarray

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, keep: np.ndarray) -> "PhaseSingularityTrack":
        return PhaseSingularityTrack(self.frames[keep], self.faces[keep], self.charges[keep],
                                     self.centroids[keep])

    def in_span(self, lo: int, hi: int) -> "PhaseSingularityTrack":
        return self.subset((self.frames >= lo) & (self.frames < hi))

    def per_frame(self, n_frames: int) -> np.ndarray:
        return np.bincount(self.frames, minlength=n_frames)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "face", "charge"])
        for f, fc, q in zip(self.frames, self.faces, self.charges):
            w.writerow([int(f), int(fc), int(q)])
        return buf.getvalue()


def detect_ps(phase: np.ndarray, mesh: MeshGraph) -> PhaseSingularityTrack:
    """Faces whose phase winding is within 0.1 of +1 or -1 turn."""
    q = face_charges(phase, mesh.faces)
    hit = np.abs(np.abs(q) - 1.0) < CHARGE_TOL
    face_idx, frames = np.nonzero(hit)
    order = np.lexsort((face_idx, frames))
    face_idx, frames = face_idx[order], frames[order]
    charges = np.sign(q[face_idx, frames]).astype(int)
    return PhaseSingularityTrack(frames.astype(int), face_idx.astype(int), charges,
                                 mesh.face_centroids()[face_idx])


def face_hops(mesh: MeshGraph, hops: np.ndarray | None = None) -> np.ndarray:
    """Face-to-face distance as the minimum vertex hop count between them."""
    if hops is None:
        hops = mesh.hop_distances()
    f = mesh.faces
    best = np.full((len(f), len(f)), np.inf)
    for i in range(3):
        for j in range(3):
            best = np.minimum(best, hops[np.ix_(f[:, i], f[:, j])])
    return best


def ps_tpr(pred: PhaseSingularityTrack, truth: PhaseSingularityTrack, mesh: MeshGraph,
           sampling_rate: float, time_tol: float = 0.1, hop_tol: int = 4,
           n_boot: int = 1000, seed: int = 0, fhops: np.ndarray | None = None) -> tuple[float, float]:
    """Fraction of true PSs with a predicted PS nearby, and its bootstrap std.

    A truth PS counts as detected when any predicted PS lies within
    round(time_tol * rate) frames and ``hop_tol`` hops (many-to-one matching).
    """
    if len(truth) == 0:
        raise ValueError("truth track is empty; detection rate undefined")
    if len(pred) == 0:
        return 0.0, 0.0
    if fhops is None:
        fhops = face_hops(mesh)
    frame_tol = int(round(time_tol * sampling_rate))
    dt = np.abs(truth.frames[:, None] - pred.frames[None, :]) <= frame_tol
    dx = fhops[np.ix_(truth.faces, pred.faces)] <= hop_tol
    detected = (dt & dx).any(axis=1).astype(float)
    rng = np.random.default_rng(seed)
    boots = detected[rng.integers(0, detected.size, size=(n_boot, detected.size))].mean(axis=1)
    return float(detected.mean()), float(boots.std())


def central_span(n_frames: int, width: int = 70) -> tuple[int, int]:
    lo = max(0, (n_frames - width) // 2)
    return lo, min(n_frames, lo + width)


def dominant_frequency(signal: np.ndarray, sampling_rate: float) -> tuple[float, bool]:
    """Frequency (Hz) of the largest non-DC spectral peak; flags constant input."""
    x = np.asarray(signal, dtype=float)
    if x.size < 16:
        raise ValueError("dominant frequency needs at least 16 samples")
    x = x - x.mean()
    if np.abs(x).max() <= 1e-12:
        return 0.0, True
    spec = np.abs(np.fft.rfft(x))
    k = int(np.argmax(spec[1:]) + 1)
    return float(k * sampling_rate / x.size), False
