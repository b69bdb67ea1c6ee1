import numpy as np
import pytest

from latticerf.config import ConfigError
from latticerf.geometry import generate_lattice
from latticerf.spatial import LatticeIndex, SpatialIndex, build_index, knn_within_radius
from oracles import brute_knn


def assert_matches_brute(index, points, queries, k, radius):
    idx, dist = index.query(queries, k, radius)
    for row, q in enumerate(queries):
        ref = brute_knn(points, q, k, radius)
        got = [(int(i), float(d)) for i, d in zip(idx[row], dist[row]) if i >= 0]
        assert [i for i, _ in got] == [i for i, _ in ref]
        np.testing.assert_array_equal([d for _, d in got], [d for _, d in ref])
        assert (idx[row, len(ref):] == -1).all() and np.isinf(dist[row, len(ref):]).all()


def test_kdtree_matches_brute_force(rng):
    pts = rng.uniform(-1, 1, (600, 3))
    queries = rng.uniform(-1.2, 1.2, (60, 3))
    assert_matches_brute(SpatialIndex(pts), pts, queries, 4, 0.25)


def test_ties_go_to_lower_index():
    # eight points equidistant from the origin; duplicates included
    pts = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1],
                    [1, 0, 0], [0.0, 0.0, 1.0]], dtype=float)
    idx, _ = SpatialIndex(pts).query(np.zeros((1, 3)), 3, 2.0)
    assert idx[0].tolist() == [0, 1, 2]
    idx, _ = LatticeIndex(generate_lattice(3), 3).query(np.zeros((1, 3)), 7, 1.5)
    assert idx[0].tolist() == [13, 4, 10, 12, 14, 16, 22]


def test_lattice_index_matches_brute_force(rng):
    r = 7
    pts = generate_lattice(r)
    h = 2 / (r - 1)
    queries = np.concatenate([rng.uniform(-1.3, 1.3, (80, 3)),
                              pts[rng.choice(len(pts), 20)],                # exactly on lattice points
                              pts[rng.choice(len(pts), 20)] + 0.5 * h])     # cell centres: 8-way ties
    for k in (1, 4, 8, 10):
        assert_matches_brute(build_index(pts, r), pts, queries, k, 1.5 * h)


def test_radius_excludes_far_points():
    pts = np.array([[0, 0, 0], [0.5, 0, 0], [2.0, 0, 0]], dtype=float)
    assert knn_within_radius(SpatialIndex(pts), [0.1, 0, 0], 5, 1.0) == [(0, pytest.approx(0.1)),
                                                                         (1, pytest.approx(0.4))]
    assert knn_within_radius(SpatialIndex(pts), [10.0, 0, 0], 2, 1.0) == []


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros((4, 2)), np.array([[np.nan, 0, 0]])])
def test_bad_point_sets_rejected(bad):
    with pytest.raises(ConfigError):
        SpatialIndex(bad)


def test_bad_query_parameters_rejected():
    index = SpatialIndex(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        index.query(np.zeros((1, 3)), 0, 1.0)
    with pytest.raises(ConfigError):
        index.query(np.zeros((1, 3)), 1, 0.0)
