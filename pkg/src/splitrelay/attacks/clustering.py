"""Label-matching by clustering intercepted activations.

A curious trainer clusters the activations it receives and hopes each
cluster is one true class. Success is measured as the fraction of true
classes whose sample sets are recovered exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import Stream

NOISE = -1


@dataclass
class ClusterOutcome:
    assignments: np.ndarray
    k_found: int
    perfect_accuracy: float | None = None
    eps: float | None = None  # DBSCAN radius actually used
    silhouette: float | None = None


def pairwise_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def perfect_cluster_accuracy(assignments, true_groups) -> float:
    """Fraction of true groups that equal some predicted cluster as a set.

    Samples labelled ``-1`` (noise) belong to no predicted cluster.
    """
    a = np.asarray(assignments)
    t = np.asarray(true_groups)
    if a.shape != t.shape:
        raise ValueError("assignments and true groups cover different samples")
    groups = np.unique(t)
    if groups.size == 0:
        return 0.0
    clusters = {c: frozenset(np.flatnonzero(a == c)) for c in np.unique(a) if c != NOISE}
    cluster_sets = set(clusters.values())
    hits = sum(frozenset(np.flatnonzero(t == g)) in cluster_sets for g in groups)
    return hits / groups.size


def silhouette(dist: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette from a precomputed distance matrix (singletons score 0)."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if not 2 <= ids.size <= len(labels) - 1:
        raise ValueError("silhouette needs 2 <= k <= n-1 clusters")
    onehot = labels[:, None] == ids[None, :]
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot
    own = np.searchsorted(ids, labels)
    rows = np.arange(len(labels))
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[rows, own] / np.maximum(own_size - 1, 1), 0.0)
    means = sums / sizes
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def _kmeans_pp(x, k, stream_seed):
    """k-means++ seeding driven by a counter-mode stream."""
    n = len(x)
    u = Stream.of("kmeans++", *stream_seed).uniform(k)
    centers = [x[min(int(u[0] * n), n - 1)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(d2), u[j] * total, side="right"))
        centers.append(x[min(idx, n - 1)])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def lloyd(x, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd's iterations from k-means++ seeds until assignments stop changing."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"{len(x)} rows cannot form {k} clusters")
    centers = _kmeans_pp(x, k, (seed, k))
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    _, labels = np.unique(labels, return_inverse=True)
    return labels, centers


def kmeans_auto(x, k_range=range(2, 9), seed: int = 0, true_groups=None) -> ClusterOutcome:
    """k-means for each k in ``k_range``; keep the k with the best mean silhouette."""
    x = np.asarray(x, dtype=np.float64)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    if len(x) < max(ks):
        raise ValueError(f"{len(x)} rows cannot form {max(ks)} clusters")
    dist = pairwise_distances(x)
    best = None
    for k in ks:
        if k < 2:
            continue
        labels, _ = lloyd(x, k, seed)
        found = int(labels.max()) + 1
        if not 2 <= found <= len(x) - 1:
            continue  # too few distinct points for this k
        score = silhouette(dist, labels)
        if best is None or score > best[0]:
            best = (score, labels, found)
    if best is None:
        labels, found, score = np.zeros(len(x), dtype=np.int64), 1, None
    else:
        score, labels, found = best
    acc = None if true_groups is None else perfect_cluster_accuracy(labels, true_groups)
    return ClusterOutcome(labels, found, acc, silhouette=score)


def k_distances(dist: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest point, counting itself."""
    return np.sort(dist, axis=1)[:, k - 1]


def elbow_eps(kdist) -> float:
    """Knee of the ascending k-distance curve: the point farthest from its chord."""
    y = np.sort(np.asarray(kdist, dtype=np.float64))
    if y.size < 3 or y[-1] == y[0]:
        return float(y[-1])
    t = np.linspace(0.0, 1.0, y.size)
    yn = (y - y[0]) / (y[-1] - y[0])
    return float(y[int(np.argmax(t - yn))])


def dbscan(x, min_pts: int = 5, eps: float | None = None, true_groups=None) -> ClusterOutcome:
    """Density-based clustering; a point is core when its eps-ball holds min_pts points (itself included)."""
    if min_pts < 2:
        raise ValueError("min_pts must be at least 2")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n < min_pts:
        acc = None if true_groups is None else perfect_cluster_accuracy(labels, true_groups)
        return ClusterOutcome(labels, 0, acc, eps=eps)
    dist = pairwise_distances(x)
    if eps is None:
        eps = elbow_eps(k_distances(dist, min_pts))
    neighbours = dist <= eps
    core = neighbours.sum(axis=1) >= min_pts
    cluster = 0
    for p in range(n):
        if not core[p] or labels[p] != NOISE:
            continue
        labels[p] = cluster
        frontier = [p]
        while frontier:
            q = frontier.pop()
            for r in np.flatnonzero(neighbours[q]):
                if labels[r] == NOISE:
                    labels[r] = cluster
                    if core[r]:
                        frontier.append(r)
        cluster += 1
    acc = None if true_groups is None else perfect_cluster_accuracy(labels, true_groups)
    return ClusterOutcome(labels, cluster, acc, eps=float(eps))
