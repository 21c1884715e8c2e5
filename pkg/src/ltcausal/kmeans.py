"""k-means++ seeding plus Lloyd iterations with an inertia trace.

Kept in-house because the prototype builder needs the per-iteration inertia
sequence and deterministic farthest-point reseeding of empty clusters, which
library implementations do not expose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, d)
    labels: np.ndarray  # (n,)
    inertia_history: list[float]  # inertia after each assignment step

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Classic D^2 seeding: first center uniform, the rest distance-weighted."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    closest = np.einsum("nd,nd->n", points - centers[0], points - centers[0])
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[i] = points[idx]
        dist = np.einsum("nd,nd->n", points - centers[i], points - centers[i])
        closest = np.minimum(closest, dist)
    return centers


def kmeans(
    points: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops when the largest center shift drops below ``tol`` or after
    ``max_iters``. Empty clusters are reseeded to the point currently farthest
    from its assigned center, which keeps the inertia sequence non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ParameterError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if not (1 <= k <= n):
        raise ParameterError(f"k must be in [1, {n}], got {k}")

    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus_init(points, k, rng)
    inertia_history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)

    for _ in range(max_iters):
        dist = _squared_distances(points, centers)
        labels = dist.argmin(axis=1)
        inertia_history.append(float(dist[np.arange(n), labels].sum()))

        new_centers = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if members.shape[0] > 0:
                new_centers[j] = members.mean(axis=0)

        # Reseed empties to the globally farthest point from its own center.
        point_dist = dist[np.arange(n), labels].copy()
        for j in range(k):
            if (labels == j).sum() == 0:
                far = int(point_dist.argmax())
                new_centers[j] = points[far]
                labels[far] = j
                point_dist[far] = 0.0

        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break

    dist = _squared_distances(points, centers)
    labels = dist.argmin(axis=1)
    inertia_history.append(float(dist[np.arange(n), labels].sum()))
    return KMeansResult(centers=centers, labels=labels, inertia_history=inertia_history)
