"""Meshes, k-means coarsening and the simulated sequential catheter walk."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra, shortest_path
from sklearn.cluster import KMeans


class MeshError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class MeshGraph:
    vertices: np.ndarray  # (N, 3)
    faces: np.ndarray  # (F, 3) int
    edges: np.ndarray = field(default=None)  # (E, 2) undirected, i < j

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.edges is None:
            self.edges = edges_from_faces(self.faces)
        else:
            e = np.sort(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2), axis=1)
            self.edges = np.unique(e, axis=0)

    @property
    def n_nodes(self) -> int:
        return self.vertices.shape[0]

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        a = sp.coo_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(n, n))
        a = a.tocsr()
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    def neighbors(self) -> list[np.ndarray]:
        a = self.adjacency()
        return [a.indices[a.indptr[k]:a.indptr[k + 1]] for k in range(self.n_nodes)]

    def hop_distances(self) -> np.ndarray:
        """All-pairs graph hop counts (inf between components)."""
        return shortest_path(self.adjacency(), unweighted=True, directed=False)

    def is_connected(self) -> bool:
        return connected_components(self.adjacency(), directed=False)[0] == 1

    def validate(self) -> None:
        n = self.n_nodes
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshError("face index out of range")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise MeshError("self-loop edge")
        face_edges = {tuple(e) for e in edges_from_faces(self.faces)}
        if any(tuple(e) not in face_edges for e in self.edges):
            raise MeshError("edge not covered by any face")
        if not self.is_connected():
            raise MeshError("mesh graph is not connected")

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def to_json(self) -> dict:
        return {"vertices": self.vertices.tolist(), "faces": self.faces.tolist()}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, obj: dict) -> "MeshGraph":
        return cls(np.array(obj["vertices"], dtype=float), np.array(obj["faces"], dtype=np.int64))

    @classmethod
    def load(cls, path) -> "MeshGraph":
        return cls.from_json(json.loads(Path(path).read_text()))


def edges_from_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def build_icosphere(subdivisions: int) -> MeshGraph:
    """Unit icosphere with 10 * 4**s + 2 vertices and outward-oriented faces."""
    if subdivisions < 0:
        raise MeshError("subdivisions must be non-negative")
    if subdivisions > 6:
        raise MeshError("subdivisions above 6 exceed the supported mesh size")
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    f = list(faces)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return MeshGraph(np.array(v), np.array(f, dtype=np.int64))


def deform(mesh: MeshGraph, scale=(1.25, 1.0, 0.8), bump: float = 0.15,
           bump_dir=(0.3, 0.8, 0.5)) -> MeshGraph:
    """Smooth asymmetric deformation of vertex positions; connectivity unchanged.

    Breaks the rotational symmetry of the sphere so rigid registration is
    well posed. The bump is a raised-cosine swelling around ``bump_dir``.
    """
    v = mesh.vertices.copy()
    u = np.asarray(bump_dir, dtype=float)
    u /= np.linalg.norm(u)
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    cosang = (v / np.maximum(norm, 1e-12)) @ u
    v *= 1.0 + bump * np.clip(cosang, 0.0, None)[:, None] ** 2
    v *= np.asarray(scale, dtype=float)
    return MeshGraph(v, mesh.faces.copy(), mesh.edges.copy())


def crop(mesh: MeshGraph, keep: np.ndarray) -> tuple[MeshGraph, np.ndarray]:
    """Sub-mesh on the vertices flagged by ``keep`` (faces fully inside survive).

    Returns the new mesh and the array of original vertex indices.
    """
    keep = np.asarray(keep, dtype=bool)
    old = np.flatnonzero(keep)
    remap = -np.ones(mesh.n_nodes, dtype=np.int64)
    remap[old] = np.arange(old.size)
    faces = mesh.faces[keep[mesh.faces].all(axis=1)]
    return MeshGraph(mesh.vertices[old], remap[faces]), old


def subdivide(mesh: MeshGraph, levels: int = 1) -> MeshGraph:
    """Midpoint (1-to-4) subdivision; the original vertices keep their indices."""
    v, f = mesh.vertices, mesh.faces
    for _ in range(levels):
        if f.size == 0:
            break
        e = edges_from_faces(f)
        n = v.shape[0]
        mid = sp.csr_matrix((np.arange(n, n + len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        mid = mid + mid.T

        def m(a, b):
            return np.asarray(mid[a, b]).ravel()

        a, b, c = f.T
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        v = np.vstack([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])
        f = np.concatenate([np.c_[a, ab, ca], np.c_[b, bc, ab], np.c_[c, ca, bc],
                            np.c_[ab, bc, ca]])
    return MeshGraph(v, f)


def nearest_source_cells(mesh: MeshGraph, sources: np.ndarray) -> np.ndarray:
    """Label each vertex with the index (into ``sources``) of its hop-nearest source."""
    _, _, owner = dijkstra(mesh.adjacency(), unweighted=True, indices=np.asarray(sources),
                           min_only=True, return_predecessors=True)
    lookup = -np.ones(mesh.n_nodes, dtype=np.int64)
    lookup[np.asarray(sources)] = np.arange(len(sources))
    return lookup[owner]


def kmeans(points: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Seeded k-means++ / Lloyd clustering that never returns an empty cluster.

    Returns (labels, centroids, inertia).
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"cannot form {k} clusters from {n} points")
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=300, tol=1e-6,
                random_state=seed, algorithm="lloyd")
    labels = km.fit_predict(points)
    centroids = km.cluster_centers_.copy()
    # sklearn relocates empty clusters while iterating; a final repair keeps the
    # contract even when duplicate points collapse two centres.
    for _ in range(k):
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        d = np.linalg.norm(points - centroids[labels], axis=1)
        movable = counts[labels] > 1
        far = int(np.argmax(np.where(movable, d, -1.0)))
        labels[far] = empty[0]
        centroids[empty[0]] = points[far]
    for c in range(k):
        centroids[c] = points[labels == c].mean(axis=0)
    inertia = float(((points - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia


def cluster_graph(mesh: MeshGraph, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster-level edges (any fine edge crossing two clusters) and faces."""
    la = labels[mesh.edges]
    la = la[la[:, 0] != la[:, 1]]
    edges = np.unique(np.sort(la, axis=1), axis=0) if la.size else np.zeros((0, 2), np.int64)
    lf = labels[mesh.faces]
    distinct = (lf[:, 0] != lf[:, 1]) & (lf[:, 1] != lf[:, 2]) & (lf[:, 0] != lf[:, 2])
    lf = lf[distinct]
    if lf.size:
        # dedupe by vertex set while keeping the first orientation seen
        _, first = np.unique(np.sort(lf, axis=1), axis=0, return_index=True)
        faces = lf[np.sort(first)]
    else:
        faces = np.zeros((0, 3), np.int64)
    return edges, faces


def spatial_resample(fine: MeshGraph, values: np.ndarray, k: int, seed: int = 0):
    """Coarsen a mesh and its node x time signal to ``k`` k-means clusters.

    Coarse nodes sit at cluster centroids and carry the mean member signal.
    Returns (coarse mesh, coarse values, fine->coarse labels).
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != fine.n_nodes:
        raise ConfigurationError("series node dimension does not match the mesh")
    if k > fine.n_nodes:
        raise ConfigurationError("k exceeds the fine node count")
    labels, _, _ = kmeans(fine.vertices, k, seed)
    counts = np.bincount(labels, minlength=k).astype(float)
    member = sp.csr_matrix((np.ones(fine.n_nodes), (labels, np.arange(fine.n_nodes))),
                           shape=(k, fine.n_nodes))
    coarse_values = np.asarray(member @ values) / counts[:, None]
    centroids = np.asarray(member @ fine.vertices) / counts[:, None]
    edges, faces = cluster_graph(fine, labels, k)
    return MeshGraph(centroids, faces, edges), coarse_values, labels


@dataclass
class Patches:
    """Base catheter patches plus (for overlap > 0) their widened node sets."""

    labels: np.ndarray  # node -> base patch id
    members: list[np.ndarray]  # node sets actually observed per patch
    centroids: np.ndarray  # (P, 3)
    area_fraction: float
    overlap: int

    @property
    def count(self) -> int:
        return len(self.members)


def patch_count(area_fraction: float) -> int:
    if not 0.0 < area_fraction <= 1.0:
        raise ConfigurationError("area fraction must lie in (0, 1]")
    # guard float noise such as 1/0.1 = 10.000000000000002
    return int(math.ceil(round(1.0 / area_fraction, 9)))


def make_patches(mesh: MeshGraph, area_fraction: float, overlap: int = 0, seed: int = 0) -> Patches:
    """Split the mesh into ceil(1/area) k-means patches.

    With ``overlap = o > 0`` every patch additionally claims the nodes of each
    adjacent patch lying within ``o`` hops of their shared boundary, so the
    boundary band is observed by both patches.
    """
    if overlap < 0:
        raise ConfigurationError("overlap level must be non-negative")
    p = patch_count(area_fraction)
    if p > mesh.n_nodes:
        raise ConfigurationError(f"{p} patches exceed {mesh.n_nodes} nodes")
    labels, _, _ = kmeans(mesh.vertices, p, seed)
    centroids = np.array([mesh.vertices[labels == c].mean(axis=0) for c in range(p)])
    members = [np.flatnonzero(labels == c) for c in range(p)]
    if overlap > 0 and p > 1:
        hops = mesh.hop_distances()
        pair_edges, _ = cluster_graph(mesh, labels, p)
        extra: list[set[int]] = [set() for _ in range(p)]
        for a, b in pair_edges:
            for src, dst in ((a, b), (b, a)):
                # nodes of src within `overlap` hops of dst's territory
                near = hops[np.ix_(members[src], members[dst])].min(axis=1) <= overlap
                extra[dst].update(members[src][near].tolist())
        members = [np.union1d(members[c], np.fromiter(extra[c], dtype=np.int64, count=len(extra[c])))
                   for c in range(p)]
    return Patches(labels, members, centroids, float(area_fraction), int(overlap))


def next_patch_probabilities(current: int, remaining: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(centroids[remaining] - centroids[current], axis=1)
    if d.sum() <= 0:
        return np.full(len(remaining), 1.0 / len(remaining))
    return d / d.sum()


def draw_cycle(centroids: np.ndarray, rng: np.random.Generator) -> list[int]:
    """One self-avoiding pass: uniform start, then distance-weighted draws."""
    p = len(centroids)
    order = [int(rng.integers(p))]
    remaining = np.array([c for c in range(p) if c != order[0]], dtype=np.int64)
    while remaining.size:
        probs = next_patch_probabilities(order[-1], remaining, centroids)
        pick = int(rng.choice(remaining.size, p=probs))
        order.append(int(remaining[pick]))
        remaining = np.delete(remaining, pick)
    return order


@dataclass
class WalkPlan:
    labels: np.ndarray
    members: list[np.ndarray]
    order: list[int]  # patch id per dwell segment, covering all frames
    dwell_frames: int
    overlap: int
    area_fraction: float
    seed: int

    def active_patch(self, frame: int) -> int:
        return self.order[frame // self.dwell_frames]

    def to_json(self) -> dict:
        return {"labels": self.labels.tolist(), "members": [m.tolist() for m in self.members],
                "order": list(self.order), "dwell_frames": self.dwell_frames,
                "overlap": self.overlap, "area_fraction": self.area_fraction, "seed": self.seed}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, obj: dict) -> "WalkPlan":
        return cls(np.array(obj["labels"], dtype=np.int64),
                   [np.array(m, dtype=np.int64) for m in obj["members"]],
                   [int(o) for o in obj["order"]], int(obj["dwell_frames"]), int(obj["overlap"]),
                   float(obj["area_fraction"]), int(obj["seed"]))

    @classmethod
    def load(cls, path) -> "WalkPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def dwell_frames(dwell_seconds: float, sampling_rate: float) -> int:
    return int(round(dwell_seconds * sampling_rate))


def sample_walk(patches: Patches, total_frames: int, dwell_seconds: float, sampling_rate: float,
                seed: int = 0, fixed: bool = False) -> WalkPlan:
    """Sequence of patch visits covering ``total_frames``.

    Every cycle visits each patch once. Training walks (``fixed=False``) draw a
    fresh cycle each time; evaluation walks repeat the first cycle verbatim.
    """
    if total_frames <= 0:
        raise ValueError("total_frames must be positive")
    if patches.count < 1:
        raise ConfigurationError("need at least one patch")
    dwell = dwell_frames(dwell_seconds, sampling_rate)
    if dwell < 1:
        raise ConfigurationError("dwell time shorter than one frame")
    rng = np.random.default_rng(seed)
    segments = -(-total_frames // dwell)
    order: list[int] = []
    first = draw_cycle(patches.centroids, rng)
    while len(order) < segments:
        order.extend(first if (fixed or not order) else draw_cycle(patches.centroids, rng))
    return WalkPlan(patches.labels, patches.members, order[:segments], dwell, patches.overlap,
                    patches.area_fraction, seed)


def walk_to_mask(plan: WalkPlan, n_nodes: int, total_frames: int) -> np.ndarray:
    """Binary node x frame observation mask for a walk."""
    if len(plan.order) * plan.dwell_frames < total_frames:
        raise ConfigurationError("walk does not cover the requested frames")
    mask = np.zeros((n_nodes, total_frames))
    for seg, patch in enumerate(plan.order):
        lo = seg * plan.dwell_frames
        if lo >= total_frames:
            break
        hi = min(lo + plan.dwell_frames, total_frames)
        mask[plan.members[patch], lo:hi] = 1.0
    return mask


def covers_once(n_patches: int, dwell: int, total_frames: int) -> bool:
    """Whether one full cycle fits inside the recording."""
    return n_patches * dwell <= total_frames
