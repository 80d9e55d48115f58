"""Per-patient dynamic margins from 2-means clustering of embeddings.

For each patient in a mini-batch, the patient's embeddings are split
into two unsupervised clusters; the distance between the cluster
centroids becomes that patient's intra-patient mining margin for the
batch. Margins are clamped to a fixed range so that near-random early
embeddings can neither flood nor starve the positive-loss filter.

The clusterer runs once per call (no multi-restart): greedy k-means++
seeding plus a principal-axis split scan, Lloyd iterations from each,
and a single-point relocation pass. On point sets small enough to
enumerate, this lands on the global 2-partition optimum almost always.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import ALPHA_CLAMP

__all__ = [
    "KMeansResult",
    "DynamicMargin",
    "DegenerateInputError",
    "kmeans2",
    "dynamic_margin",
]


class DegenerateInputError(ValueError):
    """Fewer than two distinct points: no meaningful 2-clustering."""


@dataclass
class KMeansResult:
    centroids: np.ndarray          # (2, dim)
    assignments: np.ndarray        # (n,) values in {0, 1}
    wcss: float
    iterations: int
    converged: bool
    wcss_history: list[float]      # per final-phase Lloyd iteration


@dataclass
class DynamicMargin:
    patient_id: str | None
    alpha_x: float
    fallback_used: bool
    centroid_distance: float | None = None


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ties go to the lower-index centroid (strict < on the alternative)
    d0 = np.sum((points - centroids[0]) ** 2, axis=1)
    d1 = np.sum((points - centroids[1]) ** 2, axis=1)
    return (d1 < d0).astype(int)


def _partition_wcss(points: np.ndarray, assignments: np.ndarray) -> float:
    total = 0.0
    for c in (0, 1):
        members = points[assignments == c]
        if len(members) == 0:
            return np.inf
        total += float(np.sum((members - members.mean(axis=0)) ** 2))
    return total


def _means(points: np.ndarray, assignments: np.ndarray) -> np.ndarray:
    return np.stack([points[assignments == c].mean(axis=0) for c in (0, 1)])


def _lloyd(points, centroids, tol, max_iter, history):
    """Alternate assignment and mean updates until the assignment is a
    fixed point (centroids exactly the means, every point at its nearer
    centroid) or movement falls below tol."""
    assignments = _assign(points, centroids)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        for c in (0, 1):
            if not np.any(assignments == c):
                own = np.sum((points - centroids[assignments]) ** 2, axis=1)
                assignments[int(np.argmax(own))] = c
        new_centroids = _means(points, assignments)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        new_assignments = _assign(points, centroids)
        history.append(_partition_wcss(points, assignments))
        stable = bool(np.array_equal(new_assignments, assignments))
        assignments = new_assignments
        if stable or shift < tol:
            converged = True
            break
    return centroids, assignments, iterations, converged


def _hartigan_refine(points: np.ndarray, assignments: np.ndarray,
                     max_passes: int = 50) -> np.ndarray:
    """Move single points between the two clusters while that lowers
    the objective; escapes most Lloyd-only local optima."""
    assignments = assignments.copy()
    current = _partition_wcss(points, assignments)
    for _ in range(max_passes):
        improved = False
        for i in range(len(points)):
            if np.sum(assignments == assignments[i]) <= 1:
                continue
            candidate = assignments.copy()
            candidate[i] = 1 - candidate[i]
            value = _partition_wcss(points, candidate)
            if value < current - 1e-12 * max(1.0, current):
                assignments, current = candidate, value
                improved = True
        if not improved:
            break
    return assignments


def _principal_axis_partition(points: np.ndarray) -> np.ndarray | None:
    """Best threshold split of the points ordered along their principal
    axis (the optimal 2-partition is always a split along some
    direction; the principal axis is a strong candidate)."""
    centered = points - points.mean(axis=0)
    gram = centered @ centered.T
    vals, vecs = np.linalg.eigh(gram)
    direction = centered.T @ vecs[:, -1]
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        return None
    order = np.argsort(centered @ (direction / norm), kind="stable")
    best, best_wcss = None, np.inf
    assignments = np.zeros(len(points), dtype=int)
    for cut in range(1, len(points)):
        assignments[:] = 0
        assignments[order[cut:]] = 1
        value = _partition_wcss(points, assignments)
        if value < best_wcss:
            best_wcss = value
            best = assignments.copy()
    return best


def kmeans2(points, seed: int = 0, tol: float = 1e-6,
            max_iter: int = 100) -> KMeansResult:
    """Two-cluster k-means; deterministic per seed.

    Candidate starts (greedy k-means++ seeding and a principal-axis
    split) are each polished by Lloyd plus single-point relocation; the
    better partition is then run to Lloyd's exact fixed point for the
    reported result, so the returned centroids are the means of their
    clusters and every point sits at its nearer centroid. Empty
    clusters are repaired by moving in the farthest point.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n < 2 or np.unique(pts, axis=0).shape[0] < 2:
        raise DegenerateInputError("need >= 2 distinct points for 2-means")

    rng = np.random.default_rng(seed)
    first = pts[int(rng.integers(n))]
    d2 = np.sum((pts - first) ** 2, axis=1)
    probs = d2 / d2.sum()
    candidates = rng.choice(n, size=min(n, 4), replace=True, p=probs)
    best_second, best_potential = None, np.inf
    for ci in candidates:
        potential = float(np.minimum(
            d2, np.sum((pts - pts[ci]) ** 2, axis=1)).sum())
        if potential < best_potential:
            best_potential = potential
            best_second = pts[ci]

    total_iterations = 0
    scratch: list[float] = []
    _, a_pp, it, _ = _lloyd(pts, np.stack([first, best_second]),
                            tol, max_iter, scratch)
    total_iterations += it
    a_pp = _hartigan_refine(pts, a_pp)
    best_assign = a_pp

    a_axis = _principal_axis_partition(pts)
    if a_axis is not None:
        _, a_axis, it, _ = _lloyd(pts, _means(pts, a_axis), tol, max_iter,
                                  scratch)
        total_iterations += it
        a_axis = _hartigan_refine(pts, a_axis)
        if _partition_wcss(pts, a_axis) < _partition_wcss(pts, best_assign):
            best_assign = a_axis

    history: list[float] = []
    centroids, assignments, it, converged = _lloyd(
        pts, _means(pts, best_assign), tol, max_iter, history)
    total_iterations += it
    return KMeansResult(centroids, assignments,
                        _partition_wcss(pts, assignments),
                        total_iterations, converged, history)


def dynamic_margin(patient_embeddings, default_alpha: float, seed: int = 0,
                   patient_id: str | None = None) -> DynamicMargin:
    """Distance between the patient's two embedding-cluster centroids,
    clamped to the margin range; falls back to the fixed default when
    the embeddings admit no 2-clustering."""
    try:
        result = kmeans2(patient_embeddings, seed=seed)
    except DegenerateInputError:
        return DynamicMargin(patient_id, float(default_alpha), True)
    raw = float(np.linalg.norm(result.centroids[0] - result.centroids[1]))
    lo, hi = ALPHA_CLAMP
    return DynamicMargin(patient_id, float(min(max(raw, lo), hi)), False, raw)
