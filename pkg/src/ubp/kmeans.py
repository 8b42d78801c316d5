"""Lloyd's k-means with seeded k-means++ initialisation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_clusters(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance; ties go to the lowest index."""
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or len(centroids) == 0:
        raise ValueError("no centroids to assign to")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.argmin(_sq_dists(points, centroids), axis=1)


def assign_cluster(point, centroids) -> int:
    return int(assign_clusters(np.asarray(point)[None, :], centroids)[0])


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centroid
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def fit_kmeans(points, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if len(points) < k:
        raise ValueError(f"need at least k={k} points, got {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = assign_clusters(points, centroids)
    history = [float(_sq_dists(points, centroids)[np.arange(len(points)), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        for j in range(k):
            members = points[labels == j]
            # empty clusters keep their previous centroid
            if len(members):
                centroids[j] = members.mean(axis=0)
        new_labels = assign_clusters(points, centroids)
        d = _sq_dists(points, centroids)
        history.append(float(d[np.arange(len(points)), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansResult(centroids, labels, history, n_iter)
