"""Lloyd's k-means with k-means++ seeding, restarts, empty-cluster repair and single-move refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_LLOYD_ITERATIONS = 300


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, d); the transpose of the d x k centroid matrix
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    run_histories: list[list[float]] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def inertia(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """Mean squared distance of each point to its assigned centroid."""
    diff = points - centroids[assignments]
    return float(np.einsum("nd,nd->", diff, diff) / points.shape[0])


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen centre; fall back to unused indices
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(unused))
        chosen.append(nxt)
        closest = np.minimum(closest, squared_distances(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = squared_distances(points, centroids)
    labels = dist.argmin(axis=1)  # argmin breaks ties toward the lowest index
    return labels, dist[np.arange(points.shape[0]), labels]


def _repair_empty(points, centroids, labels, dist) -> bool:
    """Reseed each empty cluster at the point farthest from its own centroid. Returns True if any moved."""
    k = centroids.shape[0]
    moved = False
    for j in range(k):
        if np.any(labels == j):
            continue
        sizes = np.bincount(labels, minlength=k)
        candidates = np.flatnonzero(sizes[labels] > 1)
        if candidates.size == 0:
            continue
        far = candidates[np.argmax(dist[candidates])]
        centroids[j] = points[far]
        labels[far] = j
        dist[far] = 0.0
        moved = True
    return moved


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_LLOYD_ITERATIONS) -> ClusterModel:
    centroids = centroids.copy()
    k = centroids.shape[0]
    labels, dist = _assign(points, centroids)
    _repair_empty(points, centroids, labels, dist)
    history = [float(dist.mean())]
    for _ in range(max_iter):
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
        new_labels, dist = _assign(points, centroids)
        _repair_empty(points, centroids, new_labels, dist)
        value = float(dist.mean())
        if value > history[-1] * (1 + 1e-12) + 1e-15:
            raise RuntimeError(f"Lloyd inertia increased from {history[-1]!r} to {value!r}")
        history.append(value)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    for j in range(k):
        members = labels == j
        if members.any():
            centroids[j] = points[members].mean(axis=0)
    labels, centroids = refine_single_moves(points, labels, centroids, history)
    return ClusterModel(centroids, labels, inertia(points, centroids, labels), history)


def refine_single_moves(
    points: np.ndarray, labels: np.ndarray, centroids: np.ndarray, history: list[float], max_passes: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Move single points between clusters while that strictly lowers the total squared error.

    A Lloyd fixpoint can still admit such a move, because moving a point shifts
    both centroids. The exact change in SSE for moving x from A to B is
    ``|B|/(|B|+1) |x - c_B|^2 - |A|/(|A|-1) |x - c_A|^2``.
    """
    labels = labels.copy()
    centroids = centroids.copy()
    n, k = points.shape[0], centroids.shape[0]
    sizes = np.bincount(labels, minlength=k).astype(float)
    for _ in range(max_passes):
        moved = False
        for i in range(n):
            a = labels[i]
            if sizes[a] <= 1:
                continue
            d2 = ((points[i] - centroids) ** 2).sum(axis=1)
            cost_out = sizes[a] / (sizes[a] - 1.0) * d2[a]
            gain = sizes / (sizes + 1.0) * d2 - cost_out
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if gain[b] < -1e-12 * max(cost_out, 1e-300):
                x = points[i]
                centroids[a] = (centroids[a] * sizes[a] - x) / (sizes[a] - 1.0)
                centroids[b] = (centroids[b] * sizes[b] + x) / (sizes[b] + 1.0)
                sizes[a] -= 1.0
                sizes[b] += 1.0
                labels[i] = b
                moved = True
        if not moved:
            break
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
        value = inertia(points, centroids, labels)
        if value > history[-1] * (1 + 1e-12) + 1e-15:
            raise RuntimeError(f"single-move refinement increased inertia from {history[-1]!r} to {value!r}")
        history.append(value)
    return labels, centroids


def kmeans(points: np.ndarray, k: int, restarts: int = 10, seed: int | np.random.Generator = 0) -> ClusterModel:
    """Best of ``restarts`` k-means++ seeded Lloyd runs by inertia (mean squared distance)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    if not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best: ClusterModel | None = None
    histories = []
    for _ in range(max(restarts, 1)):
        model = lloyd(points, kmeans_plusplus(points, k, rng))
        histories.append(model.history)
        if best is None or model.inertia < best.inertia:
            best = model
    best.run_histories = histories
    return best
