"""Intrinsic cluster-validity indices, the Kruskal-Wallis H test and a k sweep.

All distances are Euclidean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kmeans import kmeans
from .seeding import stream

METRIC_NAMES = ("silhouette", "dunn", "davies_bouldin", "calinski_harabasz")
HIGHER_IS_BETTER = {"silhouette": True, "dunn": True, "davies_bouldin": False, "calinski_harabasz": True}


class MetricError(ValueError):
    """A validity index is undefined for the given labelling."""


def _prepare(points, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    labels = np.asarray(labels)
    if labels.shape != (points.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {points.shape[0]} points")
    clusters, labels = np.unique(labels, return_inverse=True)
    if clusters.size < 2:
        raise MetricError("validity indices need at least two clusters")
    return points, labels, clusters


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    sq = (points * points).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _distances(points: np.ndarray) -> np.ndarray:
    # the Gram-matrix shortcut loses digits for near-duplicate points; use it only when large
    if points.shape[0] ** 2 * points.shape[1] > 2e7:
        return pairwise_distances(points)
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))


def silhouette(points, labels) -> float:
    """Mean silhouette; points in singleton clusters score 0."""
    points, labels, clusters = _prepare(points, labels)
    k = clusters.size
    dist = _distances(points)
    onehot = np.eye(k)[labels]
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot  # (n, k): total distance from each point to each cluster
    own = sizes[labels]
    n = points.shape[0]
    a = np.where(own > 1, sums[np.arange(n), labels] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes
    means[np.arange(n), labels] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def dunn(points, labels) -> float:
    """Smallest between-cluster point distance over the largest cluster diameter."""
    points, labels, clusters = _prepare(points, labels)
    dist = _distances(points)
    same = labels[:, None] == labels[None, :]
    diameter = dist[same].max()
    if diameter <= 0:
        raise MetricError("Dunn index undefined: every cluster has zero diameter")
    return float(dist[~same].min() / diameter)


def davies_bouldin(points, labels) -> float:
    points, labels, clusters = _prepare(points, labels)
    k = clusters.size
    centroids = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
    scatter = np.array([np.linalg.norm(points[labels == j] - centroids[j], axis=1).mean() for j in range(k)])
    sep = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0):
        raise MetricError("Davies-Bouldin index undefined: coincident centroids")
    ratio = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


def calinski_harabasz(points, labels) -> float:
    points, labels, clusters = _prepare(points, labels)
    n, k = points.shape[0], clusters.size
    if n <= k:
        raise MetricError(f"Calinski-Harabasz needs more points ({n}) than clusters ({k})")
    overall = points.mean(axis=0)
    between = within = 0.0
    for j in range(k):
        members = points[labels == j]
        c = members.mean(axis=0)
        between += members.shape[0] * float(((c - overall) ** 2).sum())
        within += float(((members - c) ** 2).sum())
    if within == 0:
        raise MetricError("Calinski-Harabasz index undefined: zero within-cluster scatter")
    return (between / (k - 1)) / (within / (n - k))


def all_indices(points, labels) -> dict[str, float]:
    """Every index, with NaN for those undefined on this labelling."""
    out = {}
    for name, fn in zip(METRIC_NAMES, (silhouette, dunn, davies_bouldin, calinski_harabasz)):
        try:
            out[name] = fn(points, labels)
        except MetricError:
            out[name] = math.nan
    return out


# ---------------------------------------------------------------------------
# Kruskal-Wallis


@dataclass(frozen=True)
class KruskalResult:
    H: float
    degrees_of_freedom: int
    p_value: float
    tie_correction: float


def midranks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """1-based average ranks and the sizes of each tie group."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], values.size]
    ranks = np.empty(values.size)
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)
    return ranks, ends - starts


def _lower_gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_gamma_fraction(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_upper_gamma(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a), by series below ``a + 1`` and continued fraction above."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x <= 0:
        return 1.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_gamma_series(a, x))
    return min(1.0, _upper_gamma_fraction(a, x))


def chi2_sf(x: float, df: int) -> float:
    return regularized_upper_gamma(df / 2.0, x / 2.0)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> KruskalResult:
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    arrays = [np.asarray(g, dtype=float).ravel() for g in groups]
    if any(a.size == 0 for a in arrays):
        raise ValueError("every Kruskal-Wallis group must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.size
    if n < 3:
        raise ValueError("Kruskal-Wallis needs at least three observations in total")
    ranks, ties = midranks(pooled)
    df = len(arrays) - 1
    correction = 1.0 - float((ties**3 - ties).sum()) / (n**3 - n)
    if correction <= 0:
        return KruskalResult(0.0, df, 1.0, 1.0)
    bounds = np.cumsum([a.size for a in arrays])[:-1]
    rank_term = sum(float(r.sum()) ** 2 / r.size for r in np.split(ranks, bounds))
    h = (12.0 / (n * (n + 1)) * rank_term - 3.0 * (n + 1)) / correction
    h = max(h, 0.0)
    return KruskalResult(h, df, chi2_sf(h, df), correction)


# ---------------------------------------------------------------------------
# model selection


@dataclass
class SweepRow:
    k: int
    silhouette: float
    dunn: float
    davies_bouldin: float
    calinski_harabasz: float
    labels: np.ndarray


@dataclass
class SweepTable:
    rows: list[SweepRow]

    def best(self) -> dict[str, int]:
        """k preferred by each index (max, except min for Davies-Bouldin)."""
        out = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(r, name) for r in self.rows])
            finite = np.where(np.isfinite(vals), vals, -np.inf if HIGHER_IS_BETTER[name] else np.inf)
            idx = int(np.argmax(finite) if HIGHER_IS_BETTER[name] else np.argmin(finite))
            out[name] = self.rows[idx].k
        return out

    def to_csv(self) -> str:
        lines = ["k," + ",".join(METRIC_NAMES)]
        for r in self.rows:
            lines.append(f"{r.k}," + ",".join(repr(float(getattr(r, m))) for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"


def k_sweep(points, k_values: Sequence[int], restarts: int = 10, seed: int = 0) -> SweepTable:
    points = np.asarray(points, dtype=float)
    if max(k_values) >= points.shape[0]:
        raise ValueError(f"largest k ({max(k_values)}) must be below the number of points ({points.shape[0]})")
    rows = []
    for k in k_values:
        model = kmeans(points, k, restarts=restarts, seed=stream(seed, "k_sweep", k))
        scores = all_indices(points, model.assignments)
        rows.append(SweepRow(k=k, labels=model.assignments, **scores))
    return SweepTable(rows)
