"""Seeded k-means: k-means++ initialization and Lloyd iteration.

Hand-rolled so tie-breaking, stopping, and RNG consumption are fully
deterministic; shared by centroid initialization and phantom region seeding.
"""

from __future__ import annotations

import numpy as np


def assign_nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per point; ties go to the smallest index."""
    p = np.asarray(points, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if p.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: points {p.shape[1]}, centroids {c.shape[1]}")
    d2 = ((p[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)


def kmeans_pp_seeds(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared-distance sampling."""
    p = np.asarray(points, dtype=np.float64)
    if n < 1 or n > p.shape[0]:
        raise ValueError(f"need 1 <= n <= {p.shape[0]}, got {n}")
    chosen = [int(rng.integers(p.shape[0]))]
    d2 = ((p - p[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            candidates = np.setdiff1d(np.arange(p.shape[0]), chosen)
            nxt = int(rng.choice(candidates))
        else:
            nxt = int(rng.choice(p.shape[0], p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((p - p[nxt]) ** 2).sum(axis=1))
    return p[chosen].copy()


def lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray, float, int]:
    """Lloyd iterations until the assignment reaches a fixed point.

    Empty clusters are re-seeded with the point farthest from its current
    centroid. Returns (centroids, assignments, objective, iterations).
    """
    p = np.asarray(points, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64).copy()
    n = c.shape[0]
    assign = assign_nearest(p, c)
    it = 0
    for it in range(1, max_iter + 1):
        for k in range(n):
            sel = assign == k
            if sel.any():
                c[k] = p[sel].mean(axis=0)
            else:
                d2 = ((p - c[assign]) ** 2).sum(axis=1)
                far = int(np.argmax(d2))
                c[k] = p[far]
                assign[far] = k
        new_assign = assign_nearest(p, c)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    obj = float(((p - c[assign]) ** 2).sum())
    return c, assign, obj, it


def kmeans(
    points: np.ndarray, n: int, seed: int, n_init: int = 1, max_iter: int = 300
) -> tuple[np.ndarray, np.ndarray, float]:
    """Best of ``n_init`` independent (k-means++ seeding, Lloyd) runs."""
    p = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        c0 = kmeans_pp_seeds(p, n, rng)
        c, a, obj, _ = lloyd(p, c0, max_iter)
        if best is None or obj < best[2]:
            best = (c, a, obj)
    return best
