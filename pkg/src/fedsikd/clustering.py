"""K-means, internal cluster-quality indices, K selection and average linkage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .seeds import derive_seed


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)  # J after every Lloyd iteration

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"points must be an (n, m) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    return x


def zscore(points) -> np.ndarray:
    """Standardize each column; constant columns map to zero."""
    x = _as_points(points)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - mu) / sd


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def inertia(points, labels, centroids) -> float:
    x = _as_points(points)
    diff = x - np.asarray(centroids)[np.asarray(labels)]
    return float((diff * diff).sum())


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


def _repair_empty(x, labels, centroids, k):
    # Reseed each empty cluster at the point farthest from its own centroid,
    # taking it only from clusters that keep at least one member.
    for c in range(k):
        counts = np.bincount(labels, minlength=k)
        if counts[c] > 0:
            continue
        dist = ((x - centroids[labels]) ** 2).sum(1)
        dist[counts[labels] < 2] = -1.0
        i = int(np.argmax(dist))
        labels[i] = c
        centroids[c] = x[i]
    return labels


def _means(x, labels, k):
    cent = np.zeros((k, x.shape[1]))
    np.add.at(cent, labels, x)
    return cent / np.bincount(labels, minlength=k)[:, None]


def _lloyd(x, k, max_iters, tol, rng):
    centroids = _kmeanspp(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        new_labels = sq_dists(x, centroids).argmin(axis=1)
        new_labels = _repair_empty(x, new_labels, centroids, k)
        new_centroids = _means(x, new_labels, k)
        history.append(inertia(x, new_labels, new_centroids))
        shift = float(((new_centroids - centroids) ** 2).sum(1).max())
        stable = labels is not None and np.array_equal(labels, new_labels)
        labels, centroids = new_labels, new_centroids
        if stable or shift <= tol:
            break
    return ClusterAssignment(labels, centroids, inertia(x, labels, centroids), history)


def kmeans(
    points,
    k: int,
    restarts: int = 10,
    max_iters: int = 300,
    tol: float = 1e-6,
    rng_seed: int = 0,
) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` runs by inertia."""
    x = _as_points(points)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if restarts < 1 or max_iters < 1 or tol <= 0:
        raise ValueError("restarts and max_iters must be positive, tol > 0")
    rng = np.random.default_rng(rng_seed)
    best = None
    for _ in range(restarts):
        run = _lloyd(x, k, max_iters, tol, rng)
        if best is None or run.inertia < best.inertia:
            best = run
    return best


def _check_labels(x, labels, min_clusters=2):
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError("one label per point required")
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < min_clusters:
        raise ValueError(f"need at least {min_clusters} clusters, got {len(uniq)}")
    return inv, len(uniq)


def silhouette(points, labels) -> float:
    """Mean silhouette; members of singleton clusters score 0."""
    x = _as_points(points)
    lab, k = _check_labels(x, labels)
    d = np.sqrt(sq_dists(x, x))
    np.fill_diagonal(d, 0.0)
    counts = np.bincount(lab, minlength=k)
    sums = np.zeros((len(x), k))
    for c in range(k):
        sums[:, c] = d[:, lab == c].sum(axis=1)
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = lab[i]
        if counts[own] < 2:
            continue
        a = sums[i, own] / (counts[own] - 1)
        others = [sums[i, c] / counts[c] for c in range(k) if c != own]
        b = min(others)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def calinski_harabasz(points, labels) -> float:
    """Variance-ratio criterion; returns ``math.inf`` when within-cluster dispersion is zero."""
    x = _as_points(points)
    lab, k = _check_labels(x, labels)
    n = len(x)
    if k >= n:
        raise ValueError(f"Calinski-Harabasz needs fewer clusters than points (k={k}, n={n})")
    overall = x.mean(axis=0)
    between = within = 0.0
    for c in range(k):
        members = x[lab == c]
        centre = members.mean(axis=0)
        between += len(members) * float(((centre - overall) ** 2).sum())
        within += float(((members - centre) ** 2).sum())
    if within == 0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def davies_bouldin(points, labels) -> float:
    """Mean worst-case similarity ratio (lower is better); ``math.inf`` for coincident centroids."""
    x = _as_points(points)
    lab, k = _check_labels(x, labels)
    cents = np.array([x[lab == c].mean(axis=0) for c in range(k)])
    spread = np.array([np.sqrt(((x[lab == c] - cents[c]) ** 2).sum(1)).mean() for c in range(k)])
    worst = []
    for i in range(k):
        ratios = []
        for j in range(k):
            if i == j:
                continue
            dij = float(np.sqrt(((cents[i] - cents[j]) ** 2).sum()))
            ratios.append(math.inf if dij == 0 else (spread[i] + spread[j]) / dij)
        worst.append(max(ratios))
    return float(np.mean(worst))


@dataclass
class KScore:
    k: int
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float
    inertia: float
    rank_sum: float = 0.0


def select_k(
    points,
    k_min: int = 2,
    k_max: int = 10,
    rng_seed: int = 0,
    restarts: int = 10,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> tuple[int, list[KScore]]:
    """Pick K by the smallest rank sum over silhouette, CH (both higher-better) and DB (lower-better).

    Equal rank sums resolve to the smaller K.
    """
    x = _as_points(points)
    n = len(x)
    if k_min > k_max:
        raise ValueError(f"empty K range [{k_min}, {k_max}]")
    if k_min < 2 or k_max > n - 1:
        raise ValueError(f"K range must satisfy 2 <= k_min <= k_max <= n-1 = {n - 1}")
    table = []
    for k in range(k_min, k_max + 1):
        fit = kmeans(x, k, restarts, max_iters, tol, derive_seed(rng_seed, "select_k", k))
        table.append(
            KScore(
                k,
                silhouette(x, fit.labels),
                calinski_harabasz(x, fit.labels),
                davies_bouldin(x, fit.labels),
                fit.inertia,
            )
        )
    sil = rankdata([-s.silhouette for s in table], method="min")
    ch = rankdata([-s.calinski_harabasz for s in table], method="min")
    db = rankdata([s.davies_bouldin for s in table], method="min")
    for s, r in zip(table, sil + ch + db):
        s.rank_sum = float(r)
    best = min(table, key=lambda s: (s.rank_sum, s.k))
    return best.k, table


def linkage_merges(points=None, distances=None) -> list[tuple[int, int, float, int]]:
    """Full average-linkage merge sequence from points or a distance matrix.

    Each entry is ``(a, b, distance, size)`` where ``a < b`` are cluster ids
    in scipy's convention (points are 0..n-1, the i-th merge creates n+i).
    Ties resolve to the lexicographically smallest pair of current ids.
    """
    dist = _distance_matrix(points, distances)
    n = len(dist)
    active = list(range(n))
    sizes = {i: 1 for i in range(n)}
    d = {(i, j): float(dist[i, j]) for i in range(n) for j in range(i + 1, n)}
    merges = []
    next_id = n
    while len(active) > 1:
        (a, b), best = min(d.items(), key=lambda kv: (kv[1], kv[0]))
        na, nb = sizes[a], sizes[b]
        active.remove(a)
        active.remove(b)
        for c in active:
            dac = d.pop((min(a, c), max(a, c)))
            dbc = d.pop((min(b, c), max(b, c)))
            d[(c, next_id)] = (na * dac + nb * dbc) / (na + nb)
        del d[(a, b)]
        sizes[next_id] = na + nb
        merges.append((a, b, best, na + nb))
        active.append(next_id)
        next_id += 1
    return merges


def _distance_matrix(points, distances) -> np.ndarray:
    if (points is None) == (distances is None):
        raise ValueError("give exactly one of points and distances")
    if distances is not None:
        dist = np.asarray(distances, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
            raise ValueError("distances must be a square matrix")
        return dist
    x = _as_points(points)
    dist = np.sqrt(sq_dists(x, x))
    np.fill_diagonal(dist, 0.0)
    return dist


def agglomerative_cluster(
    points=None,
    distance_threshold: float | None = None,
    fixed_k: int | None = None,
    distances=None,
) -> np.ndarray:
    """Average-linkage clustering cut at a distance or at a cluster count.

    Labels are numbered in order of each cluster's lowest point index.
    """
    if (distance_threshold is None) == (fixed_k is None):
        raise ValueError("give exactly one of distance_threshold and fixed_k")
    dist = _distance_matrix(points, distances)
    n = len(dist)
    if distance_threshold is not None and not distance_threshold > 0:
        raise ValueError(f"distance_threshold must be positive, got {distance_threshold}")
    if fixed_k is not None and not 1 <= fixed_k <= n:
        raise ValueError(f"fixed_k must lie in [1, {n}], got {fixed_k}")
    members = {i: [i] for i in range(n)}
    for step, (a, b, height, _) in enumerate(linkage_merges(distances=dist)):
        if distance_threshold is not None and height > distance_threshold:
            break
        if fixed_k is not None and len(members) <= fixed_k:
            break
        members[n + step] = members.pop(a) + members.pop(b)
    labels = np.empty(n, dtype=np.int64)
    for new, group in enumerate(sorted(members.values(), key=min)):
        labels[group] = new
    return labels
