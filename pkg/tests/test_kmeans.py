import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ubp.kmeans import assign_cluster, assign_clusters, fit_kmeans


def test_k_points_own_centroids():
    pts = np.random.default_rng(0).normal(size=(5, 16))
    res = fit_kmeans(pts, 5, seed=1)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centroids)) == sorted(map(tuple, pts))


def test_two_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.1, (50, 16))
    b = rng.normal(10, 0.1, (60, 16))
    res = fit_kmeans(np.vstack([a, b]), 2, seed=0)
    got = sorted(res.centroids.tolist(), key=lambda c: c[0])
    np.testing.assert_allclose(got[0], a.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(got[1], b.mean(axis=0), atol=1e-9)


def test_duplicates_only():
    pts = np.tile(np.arange(16.0), (7, 1))
    res = fit_kmeans(pts, 3, seed=0)
    # exhaustive oracle: best inertia over all assignments of 7 points to 3 clusters
    best = min(
        sum(((pts[labels == j] - pts[labels == j].mean(axis=0)) ** 2).sum()
            for j in range(3) if (labels == j).any())
        for labels in map(np.array, itertools.product(range(3), repeat=7)))
    assert res.inertia == best == 0.0
    np.testing.assert_array_equal(res.centroids, pts[:3])
    assert set(res.labels.tolist()) == {0}


def test_too_few_points():
    with pytest.raises(ValueError):
        fit_kmeans(np.zeros((3, 16)), 5, seed=0)


def test_assign_tie_and_self():
    c = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]])
    assert assign_cluster(c[2], c) == 2
    assert assign_cluster([1.0, 0.0], c) == 0
    with pytest.raises(ValueError):
        assign_cluster([1.0, 0.0], np.zeros((0, 2)))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_assign_matches_scan(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 5, (6, 3)).astype(float)
    p = rng.integers(0, 5, 3).astype(float)
    dists = [float(((p - ci) ** 2).sum()) for ci in c]
    assert assign_cluster(p, c) == dists.index(min(dists))


@given(st.integers(0, 10_000), st.sampled_from([5, 10]))
@settings(max_examples=20, deadline=None)
def test_inertia_nonincreasing_and_fixpoint(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 256, (40, 16)).astype(float)
    res = fit_kmeans(pts, k, seed=seed)
    hist = np.array(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * hist[0])
    np.testing.assert_array_equal(assign_clusters(pts, res.centroids), res.labels)


def test_seeded_determinism():
    pts = np.random.default_rng(0).normal(size=(30, 16))
    a, b = fit_kmeans(pts, 5, seed=4), fit_kmeans(pts, 5, seed=4)
    np.testing.assert_array_equal(a.centroids, b.centroids)
