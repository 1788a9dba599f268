import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.sparse import csgraph

from augoverlap.graph import (
    DisjointSet,
    build_graph,
    connected_components,
    critical_radii,
    graph_diameter,
    intra_class_diameter,
    is_classwise_connected,
    label_consistency_violations,
    mst_bottleneck,
    n_components,
    scaling_experiment,
    write_scaling_csv,
)
from augoverlap.sphere import make_dataset, pairwise_geodesic


def random_points(rng, n, d=3):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def bfs_diameter(n, edges):
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    best = 0
    for s in range(n):
        dist = [-1] * n
        dist[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    q.append(v)
        if min(dist) < 0:
            return math.inf
        best = max(best, max(dist))
    return best


@settings(max_examples=40)
@given(st.integers(1, 60), st.lists(st.tuples(st.integers(0, 59), st.integers(0, 59)), max_size=80))
def test_disjoint_set_matches_scipy(n, pairs):
    pairs = [(a % n, b % n) for a, b in pairs]
    ds = DisjointSet(n)
    if pairs:
        i, j = np.array(pairs).T
        ds.union_edges(i, j)
        adj = np.zeros((n, n))
        adj[i, j] = adj[j, i] = 1
    else:
        adj = np.zeros((n, n))
    k, lab = csgraph.connected_components(adj, directed=False)
    roots = ds.roots()
    assert len(np.unique(roots)) == k
    # same partition, roots are set minima
    for c in range(k):
        members = np.flatnonzero(lab == c)
        assert np.all(roots[members] == members.min())
    # the scalar path agrees
    ds2 = DisjointSet(n)
    for a, b in pairs:
        ds2.union(a, b)
    assert np.array_equal(ds2.roots(), roots)


def test_edges_match_brute_force():
    rng = np.random.default_rng(0)
    pts = random_points(rng, 300)
    g = build_graph(pts, 0.15)
    D = pairwise_geodesic(pts)
    i, j = np.nonzero(np.triu(D <= 0.3, 1))
    assert set(zip(i.tolist(), j.tolist())) == set(map(tuple, g.edges.tolist()))
    assert np.all(g.edge_distances() <= 0.3)


def test_r_zero_is_edgeless_even_with_duplicates():
    pts = np.array([[0, 0, 1.0], [0, 0, 1.0], [1.0, 0, 0]])
    g = build_graph(pts, 0.0)
    assert g.n_edges == 0
    assert n_components(g) == 3


def test_two_point_threshold():
    t = 0.4
    pts = np.array([[0, 0, 1.0], [math.sin(t), 0, math.cos(t)]])
    assert build_graph(pts, 0.2000001).n_edges == 1
    assert build_graph(pts, 0.1999).n_edges == 0


def test_component_ids_ordered_by_smallest_vertex():
    pts = np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 0.0001, 1.0], [-1.0, 0, 0]])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    comp = connected_components(build_graph(pts, 0.01))
    assert comp.tolist() == [0, 1, 0, 2]


def test_paper_preset_graph_properties():
    ds = make_dataset(2, 400, [[0, 0, 1], [0, 0, -1]], 1.0, seed=0)
    g = build_graph(ds, 0.1)
    assert is_classwise_connected(g) == [True, True]
    assert label_consistency_violations(g)["inter_fraction"] == 0.0
    g = build_graph(ds, 1.5)
    assert label_consistency_violations(g)["inter_edges"] > 0
    assert n_components(g) == 1


def test_diameter_matches_bfs_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        pts = random_points(rng, 40)
        g = build_graph(pts, rng.uniform(0.2, 0.9))
        assert graph_diameter(g.adjacency()) == bfs_diameter(g.n, g.edges.tolist())


def test_diameter_small_cases():
    pts = np.array([[0, 0, 1.0]])
    assert graph_diameter(build_graph(pts, 0.1).adjacency()) == 0
    pts = random_points(np.random.default_rng(0), 30)
    assert graph_diameter(build_graph(pts, 0.0).adjacency()) == math.inf
    assert graph_diameter(build_graph(pts, math.pi / 2).adjacency()) == 1


def test_intra_class_diameter_requires_labels_and_nonempty():
    pts = random_points(np.random.default_rng(1), 10)
    g = build_graph(pts, 0.5)
    with pytest.raises(ValueError):
        intra_class_diameter(g)
    g = build_graph(pts, 0.5, labels=np.array([0] * 5 + [2] * 5))
    with pytest.raises(ValueError, match="class 1"):
        intra_class_diameter(g)


def test_critical_radii_against_oracles():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pts = random_points(rng, 80)
        labels = rng.integers(0, 2, 80)
        cr = critical_radii(pts, labels)
        D = pairwise_geodesic(pts)
        off = D[np.triu_indices(80, 1)]
        assert cr.r1 == off.min() and cr.r2 == off.max()
        np.fill_diagonal(D, np.inf)
        assert cr.d_N == D.min(axis=1).max()
        assert cr.r3 == pytest.approx(0.5 * D[labels[:, None] != labels[None, :]].min())
        assert cr.r1 <= cr.d_N <= cr.c_N <= cr.r2
        # c_N is the smallest distance threshold that connects the graph
        assert n_components(build_graph(pts, cr.c_N / 2)) == 1
        assert n_components(build_graph(pts, np.nextafter(cr.c_N, 0) / 2)) > 1


def test_mst_bottleneck_two_clusters():
    a = np.array([[0, 0, 1.0], [0, 0.01, 1.0]])
    b = -a
    pts = np.concatenate([a, b])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    gap = pairwise_geodesic(pts[:2], pts[2:]).min()
    assert mst_bottleneck(pts) == pytest.approx(gap)


def test_scaling_records(tmp_path):
    recs = scaling_experiment([50, 100], d=2, trials=2, seed=0)
    assert len(recs) == 4
    assert all(r.d_N <= r.c_N for r in recs)
    write_scaling_csv(recs, tmp_path / "s.csv")
    header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["N", "d", "trial", "c_N", "d_N"]
    again = scaling_experiment([50, 100], d=2, trials=2, seed=0)
    assert [r.c_N for r in recs] == [r.c_N for r in again]


def test_csv_outputs(tmp_path):
    ds = make_dataset(2, 30, [[0, 0, 1], [0, 0, -1]], 1.0, seed=1)
    g = build_graph(ds, 0.2)
    g.to_edge_csv(tmp_path / "e.csv")
    g.to_component_csv(tmp_path / "c.csv")
    assert (tmp_path / "e.csv").read_text().startswith("i,j,distance\n")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 61
