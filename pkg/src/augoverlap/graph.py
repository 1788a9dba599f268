"""Augmentation graphs over natural samples and the quantities built on them.

Vertices are natural samples.  Two samples are joined when their radius-r
augmentation disks overlap, i.e. when their geodesic distance is at most
``connect_factor * r`` (``connect_factor=2`` for overlapping disks, ``1`` for
the literal isolation/completeness thresholds).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from augoverlap._io import write_csv
from augoverlap.sphere import (
    LabeledSphereDataset,
    SphericalCap,
    ball_volume,
    gram,
    pairwise_geodesic,
    sample_cap_uniform,
)

BLOCK = 512


class DisjointSet:
    """Union-find over ``0..n-1`` where every root is the smallest index of its set.

    Single unions use path halving; ``union_edges`` hooks whole edge arrays at
    once (larger root under smaller) and flattens by pointer jumping, which
    needs O(log n) rounds.
    """

    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, x: int) -> int:
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return int(x)

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        lo, hi = min(ra, rb), max(ra, rb)
        self.parent[hi] = lo
        return True

    def flatten(self) -> np.ndarray:
        p = self.parent
        while True:
            q = p[p]
            if np.array_equal(q, p):
                return p
            p = q
            self.parent = p

    def union_edges(self, i: np.ndarray, j: np.ndarray) -> None:
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        while len(i):
            roots = self.flatten()
            ri, rj = roots[i], roots[j]
            live = ri != rj
            if not live.any():
                return
            i, j, ri, rj = i[live], j[live], ri[live], rj[live]
            np.minimum.at(self.parent, np.maximum(ri, rj), np.minimum(ri, rj))

    def roots(self) -> np.ndarray:
        return self.flatten().copy()


def _threshold_pairs(points: np.ndarray, thresh: float):
    n = len(points)
    rows, cols = [], []
    for i0 in range(0, n, BLOCK):
        i1 = min(n, i0 + BLOCK)
        dist = pairwise_geodesic(points[i0:i1], points[i0:])
        a, b = np.nonzero(dist <= thresh)
        keep = b > a
        rows.append((a[keep] + i0).astype(np.int32))
        cols.append((b[keep] + i0).astype(np.int32))
    if not rows:
        return np.empty(0, np.int32), np.empty(0, np.int32)
    return np.concatenate(rows), np.concatenate(cols)


@dataclass
class AugmentationGraph:
    n: int
    edges: np.ndarray  # (E, 2) int32, i < j, row-major order
    r: float
    connect_factor: float
    points: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int | None = None

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def threshold(self) -> float:
        return self.connect_factor * self.r

    def edge_distances(self) -> np.ndarray:
        i, j = self.edges[:, 0], self.edges[:, 1]
        out = np.empty(len(i))
        for s in range(0, len(i), 1 << 20):
            a, b = self.points[i[s : s + (1 << 20)]], self.points[j[s : s + (1 << 20)]]
            dots = a[:, 0] * b[:, 0]
            for k in range(1, a.shape[1]):
                dots += a[:, k] * b[:, k]
            out[s : s + len(a)] = np.arccos(np.clip(dots, -1.0, 1.0))
        return out

    def adjacency(self, vertices: np.ndarray | None = None) -> sparse.csr_matrix:
        """Symmetric CSR adjacency, optionally induced on ``vertices``."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        n = self.n
        if vertices is not None:
            remap = np.full(self.n, -1, dtype=np.int64)
            remap[vertices] = np.arange(len(vertices))
            keep = (remap[i] >= 0) & (remap[j] >= 0)
            i, j, n = remap[i[keep]], remap[j[keep]], len(vertices)
        data = np.ones(2 * len(i), dtype=np.int8)
        return sparse.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def _class_vertices(self):
        if self.labels is None:
            raise ValueError("graph has no labels")
        K = self.n_classes if self.n_classes is not None else int(self.labels.max()) + 1
        out = []
        for k in range(K):
            idx = np.flatnonzero(self.labels == k)
            if len(idx) == 0:
                raise ValueError(f"class {k} has no vertices")
            out.append(idx)
        return out

    def to_edge_csv(self, path) -> None:
        d = self.edge_distances()
        write_csv(path, ["i", "j", "distance"], zip(self.edges[:, 0].tolist(), self.edges[:, 1].tolist(), d.tolist()))

    def to_component_csv(self, path) -> None:
        comp = connected_components(self)
        labels = self.labels if self.labels is not None else np.full(self.n, -1)
        write_csv(path, ["id", "component", "label"], zip(range(self.n), comp.tolist(), labels.tolist()))


def build_graph(dataset, r: float, connect_factor: float = 2.0, labels=None) -> AugmentationGraph:
    """Edge (i, j) iff geodesic distance <= connect_factor * r.

    ``dataset`` is a :class:`LabeledSphereDataset` or a point array.  At r = 0
    the augmentation is the identity and no pair overlaps, so the graph is
    edgeless even if two samples coincide.
    """
    if r < 0:
        raise ValueError("augmentation radius must be non-negative")
    if isinstance(dataset, LabeledSphereDataset):
        points, labels, K = dataset.points, dataset.labels, dataset.n_classes
    else:
        points = np.asarray(dataset, dtype=float)
        K = None if labels is None else int(np.max(labels)) + 1
    if r == 0:
        edges = np.empty((0, 2), dtype=np.int32)
    else:
        i, j = _threshold_pairs(points, connect_factor * r)
        edges = np.stack([i, j], axis=1)
    labels = None if labels is None else np.asarray(labels)
    return AugmentationGraph(len(points), edges, r, connect_factor, points, labels, K)


def connected_components(g: AugmentationGraph) -> np.ndarray:
    """Component id per vertex; ids are ordered by each component's smallest vertex."""
    ds = DisjointSet(g.n)
    ds.union_edges(g.edges[:, 0], g.edges[:, 1])
    _, ids = np.unique(ds.roots(), return_inverse=True)
    return ids


def n_components(g: AugmentationGraph) -> int:
    return int(connected_components(g).max()) + 1 if g.n else 0


def is_classwise_connected(g: AugmentationGraph) -> list[bool]:
    """Per class, whether its induced subgraph G_k is connected."""
    classes = g._class_vertices()
    i, j = g.edges[:, 0], g.edges[:, 1]
    intra = g.labels[i] == g.labels[j]
    ds = DisjointSet(g.n)
    ds.union_edges(i[intra], j[intra])
    roots = ds.roots()
    return [bool(np.all(roots[idx] == roots[idx[0]])) for idx in classes]


def label_consistency_violations(g: AugmentationGraph) -> dict:
    if g.labels is None:
        raise ValueError("graph has no labels")
    li, lj = g.labels[g.edges[:, 0]], g.labels[g.edges[:, 1]]
    inter = int(np.sum(li != lj))
    intra = int(len(li) - inter)
    total = inter + intra
    return {"inter_edges": inter, "intra_edges": intra, "inter_fraction": inter / total if total else 0.0}


def _diameter_dense(adj: sparse.csr_matrix) -> int:
    a = adj.toarray().astype(np.float32)
    reach = a + np.eye(len(a), dtype=np.float32) > 0
    hops = 1
    while not reach.all():
        nxt = (reach.astype(np.float32) @ a > 0) | reach
        if np.array_equal(nxt, reach):
            return -1
        reach = nxt
        hops += 1
    return hops


def _diameter_bfs(adj: sparse.csr_matrix) -> int:
    n = adj.shape[0]
    best = 0
    for s in range(0, n, 256):
        dist = csgraph.shortest_path(adj, directed=False, unweighted=True, indices=np.arange(s, min(n, s + 256)))
        if np.isinf(dist).any():
            return -1
        best = max(best, int(dist.max()))
    return best


def graph_diameter(adj: sparse.csr_matrix) -> float:
    """Largest hop-count shortest path; ``math.inf`` if disconnected."""
    n = adj.shape[0]
    if n <= 1:
        return 0
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    if ncomp > 1:
        return math.inf
    # all-source BFS costs n*E; boolean reachability powers cost n^3 per hop
    d = _diameter_bfs(adj) if n * adj.nnz <= 2e8 or n > 6000 else _diameter_dense(adj)
    return math.inf if d < 0 else d


def intra_class_diameter(g: AugmentationGraph) -> tuple[list, float]:
    """Per-class hop diameters D_k and their maximum (``inf`` if any class is split)."""
    per_class = [graph_diameter(g.adjacency(idx)) for idx in g._class_vertices()]
    return per_class, max(per_class)


@dataclass
class CriticalRadii:
    r1: float
    r2: float
    r3: float | None
    c_N: float
    d_N: float


def mst_bottleneck(points: np.ndarray) -> float:
    """Longest edge of the geodesic minimum spanning tree (dense Prim)."""
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points")
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = np.arccos(np.clip(gram(points[0], points)[0], -1.0, 1.0))
    best[0] = np.inf
    longest = 0.0
    for _ in range(n - 1):
        j = int(np.argmin(best))
        longest = max(longest, float(best[j]))
        in_tree[j] = True
        dj = np.arccos(np.clip(gram(points[j], points)[0], -1.0, 1.0))
        np.minimum(best, dj, out=best)
        best[in_tree] = np.inf
    return longest


def _pairwise_extrema(points: np.ndarray, labels=None):
    n = len(points)
    r1, r2 = np.inf, 0.0
    nn = np.full(n, np.inf)
    inter = np.inf
    for i0 in range(0, n, BLOCK):
        i1 = min(n, i0 + BLOCK)
        dist = pairwise_geodesic(points[i0:i1], points)
        rows = np.arange(i1 - i0)
        r2 = max(r2, float(dist.max()))
        dist[rows, rows + i0] = np.inf
        nn[i0:i1] = dist.min(axis=1)
        if labels is not None:
            foreign = labels[i0:i1, None] != labels[None, :]
            if foreign.any():
                inter = min(inter, float(dist[foreign].min()))
    r1 = float(nn.min())
    return r1, r2, nn, inter


def critical_radii(dataset, labels=None) -> CriticalRadii:
    """r1/r2 from the full pairwise scan, r3 as half the closest inter-class
    distance, c_N as the MST bottleneck and d_N as the largest nearest-neighbor
    distance.  All values are distances; the matching radius is value/alpha.
    """
    if isinstance(dataset, LabeledSphereDataset):
        points, labels = dataset.points, dataset.labels
    else:
        points = np.asarray(dataset, dtype=float)
    if len(points) < 2:
        raise ValueError("critical radii need at least two samples")
    r1, r2, nn, inter = _pairwise_extrema(points, labels)
    r3 = None
    if labels is not None and len(np.unique(labels)) > 1:
        r3 = 0.5 * inter
    return CriticalRadii(r1=r1, r2=r2, r3=r3, c_N=mst_bottleneck(points), d_N=float(nn.max()))


@dataclass
class ScalingRecord:
    N: int
    d: int
    trial: int
    c_N: float
    d_N: float
    S: float
    V_u: float
    statistic_cN: float
    statistic_dN: float
    alt_statistic_cN: float

    @classmethod
    def header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list:
        return list(asdict(self).values())


def scaling_experiment(N_list, d: int, trials: int, seed: int, area: float = 1.0) -> list[ScalingRecord]:
    """c_N and d_N for N uniform samples from one cap of the given area on S^d."""
    pole = np.zeros(d + 1)
    pole[-1] = 1.0
    cap = SphericalCap.from_area(pole, area)
    V_u = ball_volume(d)
    records = []
    for N in N_list:
        if N < 2:
            raise ValueError("each N must be at least 2")
        for t in range(trials):
            rng = np.random.default_rng([seed, N, t])
            pts = sample_cap_uniform(cap, rng, N)
            c_N = mst_bottleneck(pts)
            d_N = float(_pairwise_extrema(pts)[2].max())
            scale = N**2 / math.log(N)
            records.append(
                ScalingRecord(
                    N=N, d=d, trial=t, c_N=c_N, d_N=d_N, S=cap.area, V_u=V_u,
                    statistic_cN=c_N**d * scale,
                    statistic_dN=d_N**d * scale,
                    alt_statistic_cN=c_N**d * N / math.log(N),
                )
            )
    return records


def write_scaling_csv(records: list[ScalingRecord], path) -> None:
    write_csv(Path(path), ScalingRecord.header(), [r.row() for r in records])
