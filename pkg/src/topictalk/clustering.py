"""Clustering kernels: HDBSCAN discovery, Ward merging to a fixed count,
k-means splitting, and noise resolution.

All operations are pure functions, deterministic for fixed inputs and seeds.
Brute-force O(N^2) variants are used throughout: exact, dependency-free, and
fast enough at the corpus scales this engine targets.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import KExceedsClusters, TooFewPoints

# stands in for 1/0 when identical points merge at distance zero
_LAMBDA_MAX = 1e12


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-row cluster labels; -1 denotes noise before resolution."""

    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def has_noise(self) -> bool:
        return bool(np.any(self.labels < 0))


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    sq = np.sum(points * points, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (points @ points.T)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def _prim_mst(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """Minimum spanning tree of a dense graph; ties by lowest node index."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    in_tree[0] = True
    best[1:] = weights[0, 1:]
    parent[1:] = 0
    edges = []
    for _ in range(n - 1):
        candidates = np.where(~in_tree)[0]
        nxt = candidates[np.argmin(best[candidates])]  # argmin takes lowest index on ties
        edges.append((int(parent[nxt]), int(nxt), float(best[nxt])))
        in_tree[nxt] = True
        improved = weights[nxt, candidates] < best[candidates]
        best[candidates[improved]] = weights[nxt, candidates[improved]]
        parent[candidates[improved]] = nxt
    return edges


def _single_linkage(edges: list[tuple[int, int, float]], n: int) -> np.ndarray:
    """Dendrogram rows (left, right, distance, size); node ids n..2n-2.

    Each merge's new node becomes the union-find root of its component, so
    roots double as dendrogram node ids.
    """
    edges = sorted(edges, key=lambda e: (e[2], min(e[0], e[1]), max(e[0], e[1])))
    parent = list(range(2 * n - 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    rows = np.zeros((n - 1, 4))
    size = [1] * n + [0] * (n - 1)
    for step, (u, v, w) in enumerate(edges):
        ru, rv = find(u), find(v)
        new = n + step
        rows[step] = (ru, rv, w, size[ru] + size[rv])
        size[new] = size[ru] + size[rv]
        parent[ru] = new
        parent[rv] = new
    return rows


def _bfs_leaves(linkage: np.ndarray, node: int, n: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        cur = stack.pop()
        if cur < n:
            out.append(cur)
        else:
            row = linkage[cur - n]
            stack.append(int(row[0]))
            stack.append(int(row[1]))
    return out


def _condense_tree(linkage: np.ndarray, n: int, min_cluster_size: int):
    """Collapse the dendrogram: subtrees below min_cluster_size fall out as
    point departures; rows are (parent, child, lambda, child_size)."""
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows: list[tuple[int, int, float, int]] = []
    node_size = lambda node: 1 if node < n else int(linkage[node - n][3])

    stack = deque([root])
    while stack:
        node = stack.popleft()
        if node < n:
            continue
        left, right, dist, _ = linkage[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0.0 else _LAMBDA_MAX
        lc, rc = node_size(left), node_size(right)
        parent_label = relabel[node]
        if lc >= min_cluster_size and rc >= min_cluster_size:
            for child, count in ((left, lc), (right, rc)):
                relabel[child] = next_label
                rows.append((parent_label, next_label, lam, count))
                next_label += 1
                stack.append(child)
        else:
            for child, count in ((left, lc), (right, rc)):
                if count >= min_cluster_size:
                    relabel[child] = parent_label  # cluster continues through
                    stack.append(child)
                else:
                    for leaf in _bfs_leaves(linkage, child, n):
                        rows.append((parent_label, leaf, lam, 1))
    return rows


def _stability(rows, n: int) -> dict[int, float]:
    births: dict[int, float] = {n: 0.0}
    for parent, child, lam, size in rows:
        if size > 1 or child >= n:
            births[child] = lam
    stab: dict[int, float] = {c: 0.0 for c in births}
    for parent, child, lam, size in rows:
        stab[parent] = stab.get(parent, 0.0) + (lam - births[parent]) * size
    return stab


def _select_clusters_eom(rows, stability: dict[int, float], n: int) -> list[int]:
    """Excess-of-mass selection; the root cluster is never selectable."""
    cluster_children: dict[int, list[int]] = {}
    for parent, child, lam, size in rows:
        if child >= n:
            cluster_children.setdefault(parent, []).append(child)
    node_list = sorted((c for c in stability if c != n), reverse=True)  # leaves first
    is_cluster = {c: True for c in node_list}
    stab = dict(stability)
    for node in node_list:
        subtree = sum(stab[c] for c in cluster_children.get(node, []))
        if subtree > stab[node]:
            is_cluster[node] = False
            stab[node] = subtree
        else:
            stack = list(cluster_children.get(node, []))
            while stack:
                sub = stack.pop()
                is_cluster[sub] = False
                stack.extend(cluster_children.get(sub, []))
    return sorted(c for c in node_list if is_cluster[c])


def hdbscan_cluster(points, min_cluster_size: int) -> ClusterAssignment:
    """Density-based hierarchical clustering (HDBSCAN).

    Mutual-reachability distances -> minimum spanning tree -> condensed tree
    -> stability-based (excess of mass) cluster selection. Deterministic for
    fixed input; MST ties break by lowest node index. The result may contain
    -1 noise labels; see ``resolve_noise``.

    Raises:
        TooFewPoints: fewer points than min_cluster_size.
    """
    points = np.asarray(points, dtype=np.float64)
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    n = points.shape[0]
    if n < min_cluster_size:
        raise TooFewPoints(f"{n} points < min_cluster_size {min_cluster_size}")

    dists = _pairwise_distances(points)
    core = np.sort(dists, axis=1)[:, min_cluster_size - 1]  # row includes self at 0
    mreach = np.maximum(dists, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mreach, 0.0)

    linkage = _single_linkage(_prim_mst(mreach), n)
    rows = _condense_tree(linkage, n, min_cluster_size)
    stability = _stability(rows, n)
    selected = _select_clusters_eom(rows, stability, n)

    labels = np.full(n, -1, dtype=np.int64)
    if selected:
        cluster_map = {c: i for i, c in enumerate(selected)}
        parent_of = {child: parent for parent, child, lam, size in rows if child >= n}
        for parent, child, lam, size in rows:
            if child >= n:
                continue
            cur = parent
            while cur is not None:
                if cur in cluster_map:
                    labels[child] = cluster_map[cur]
                    break
                cur = parent_of.get(cur)
    return ClusterAssignment(labels=labels, n_clusters=len(selected))


def _centroids(points: np.ndarray, labels: np.ndarray, n_clusters: int) -> np.ndarray:
    out = np.zeros((n_clusters, points.shape[1]))
    for c in range(n_clusters):
        out[c] = points[labels == c].mean(axis=0)
    return out


def resolve_noise(points, assignment: ClusterAssignment) -> ClusterAssignment:
    """Assign every noise point to the cluster with the nearest centroid
    (Euclidean; ties to the lowest cluster label). An all-noise assignment
    collapses to a single cluster 0."""
    labels = assignment.labels.copy()
    if not assignment.has_noise:
        return assignment
    if assignment.n_clusters == 0:
        return ClusterAssignment(labels=np.zeros(len(labels), dtype=np.int64), n_clusters=1)
    points = np.asarray(points, dtype=np.float64)
    centroids = _centroids(points, labels, assignment.n_clusters)
    for i in np.where(labels < 0)[0]:
        d = np.linalg.norm(centroids - points[i], axis=1)
        labels[i] = int(np.argmin(d))  # argmin resolves ties to the lowest label
    return ClusterAssignment(labels=labels, n_clusters=assignment.n_clusters)


def _relabel_by_size(labels: np.ndarray, n_clusters: int) -> np.ndarray:
    """Densify to 0..k-1 ordered by descending size, ties by smallest row id."""
    order = sorted(
        range(n_clusters),
        key=lambda c: (-int(np.sum(labels == c)), int(np.min(np.where(labels == c)[0]))),
    )
    mapping = {old: new for new, old in enumerate(order)}
    return np.array([mapping[int(c)] for c in labels], dtype=np.int64)


def agglomerative_merge_to_k(points, assignment: ClusterAssignment,
                             k: int) -> ClusterAssignment:
    """Merge clusters pairwise by minimum Ward-criterion increase until
    exactly k remain.

    The criterion is computed on cluster centroids weighted by cluster size:
    d(A, B) = |A||B|/(|A|+|B|) * ||c_A - c_B||^2. Ties break by the lowest
    cluster-index pair. Output labels are re-densified 0..k-1 by descending
    cluster size, ties by smallest contained row id.

    Raises:
        KExceedsClusters: k exceeds the current cluster count.
    """
    if assignment.has_noise:
        raise ValueError("assignment must be noise-free; run resolve_noise first")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > assignment.n_clusters:
        raise KExceedsClusters(f"k={k} > {assignment.n_clusters} clusters")
    points = np.asarray(points, dtype=np.float64)
    labels = assignment.labels

    group: list[list[int]] = [[c] for c in range(assignment.n_clusters)]
    cents = list(_centroids(points, labels, assignment.n_clusters))
    sizes = [int(np.sum(labels == c)) for c in range(assignment.n_clusters)]

    while len(group) > k:
        best = None
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                na, nb = sizes[i], sizes[j]
                delta = na * nb / (na + nb) * float(np.sum((cents[i] - cents[j]) ** 2))
                cand = (delta, i, j)
                if best is None or cand < best:
                    best = cand
        _, i, j = best
        cents[i] = (sizes[i] * cents[i] + sizes[j] * cents[j]) / (sizes[i] + sizes[j])
        sizes[i] += sizes[j]
        group[i].extend(group[j])
        del group[j], cents[j], sizes[j]

    merged = np.empty_like(labels)
    for gi, members in enumerate(group):
        for c in members:
            merged[labels == c] = gi
    return ClusterAssignment(labels=_relabel_by_size(merged, k), n_clusters=k)


def kmeans_cluster(points, k: int, seed: int = 0, max_iter: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ initialization.

    Converges when assignments stabilize or max_iter is reached. Empty
    clusters are repaired by reseeding at the point farthest from its
    assigned centroid. Labels densified as in ``agglomerative_merge_to_k``.

    Raises:
        TooFewPoints: fewer points than k.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise TooFewPoints(f"{n} points < k={k}")

    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = float(d2.sum())
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    prev_inertia = np.inf
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        inertia = float(dists[np.arange(n), new_labels].sum())
        assert inertia <= prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)), \
            "k-means inertia increased"
        prev_inertia = inertia
        for c in range(k):  # empty-cluster repair
            if not np.any(new_labels == c):
                counts = np.bincount(new_labels, minlength=k)
                assigned = dists[np.arange(n), new_labels].copy()
                assigned[counts[new_labels] <= 1] = -np.inf  # never orphan a cluster
                far = int(np.argmax(assigned))
                centers[c] = points[far]
                new_labels[far] = c
                dists[far] = np.sum((points[far] - centers) ** 2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return ClusterAssignment(labels=_relabel_by_size(labels, k), n_clusters=k)
