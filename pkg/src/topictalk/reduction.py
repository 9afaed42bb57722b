"""Dimensionality reduction of the embedding matrix before density clustering.

Two reducer kinds behind one interface:

* ``pca_like`` — mean-centered projection onto the top-d right singular
  vectors, deterministic with a fixed sign convention. Default; exact.
* ``umap`` — a neighbor-graph embedding (fuzzy k-NN graph, spectral
  initialization, short SGD refinement), deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .errors import DimensionMismatch, RankDeficient

SGD_EPOCHS = 200
NEGATIVE_SAMPLES = 5


@dataclass(frozen=True)
class ReducerConfig:
    kind: str = "pca_like"          # "pca_like" | "umap"
    target_dim: int = 5
    random_seed: int = 0
    umap_n_neighbors: int = 15
    umap_min_dist: float = 0.0

    def __post_init__(self):
        if self.kind not in ("pca_like", "umap"):
            raise ValueError(f"unknown reducer kind {self.kind!r}")
        if self.target_dim < 2:
            raise ValueError("target_dim must be >= 2")
        if self.umap_n_neighbors < 1:
            raise ValueError("umap_n_neighbors must be >= 1")
        if self.umap_min_dist < 0:
            raise ValueError("umap_min_dist must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "target_dim": self.target_dim,
            "random_seed": self.random_seed,
            "umap_n_neighbors": self.umap_n_neighbors,
            "umap_min_dist": self.umap_min_dist,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReducerConfig":
        return cls(**d)


class PcaModel:
    """Fitted pca_like map: center with the training mean, project."""

    kind = "pca_like"

    def __init__(self, mean: np.ndarray, components: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.components = np.asarray(components, dtype=np.float64)  # d x D

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def transform(self, vectors) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"expected dimension {self.mean.shape[0]}, got {x.shape[1]}")
        return (x - self.mean) @ self.components.T

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
        }


class NeighborEmbeddingModel:
    """Fitted neighbor-graph map.

    New vectors are placed barycentrically: the weighted mean of the
    embedded coordinates of their nearest training points.
    """

    kind = "umap"

    def __init__(self, train_points: np.ndarray, train_embedded: np.ndarray,
                 n_neighbors: int):
        self.train_points = np.asarray(train_points, dtype=np.float64)
        self.train_embedded = np.asarray(train_embedded, dtype=np.float64)
        self.n_neighbors = n_neighbors

    @property
    def d(self) -> int:
        return self.train_embedded.shape[1]

    def transform(self, vectors) -> np.ndarray:
        x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if x.shape[1] != self.train_points.shape[1]:
            raise DimensionMismatch(
                f"expected dimension {self.train_points.shape[1]}, got {x.shape[1]}")
        k = min(self.n_neighbors, self.train_points.shape[0])
        out = np.empty((x.shape[0], self.d), dtype=np.float64)
        for i, v in enumerate(x):
            dists = np.linalg.norm(self.train_points - v, axis=1)
            idx = np.argsort(dists, kind="stable")[:k]
            w = 1.0 / (dists[idx] + 1e-12)
            out[i] = (w[:, None] * self.train_embedded[idx]).sum(axis=0) / w.sum()
        return out

    def to_dict(self) -> dict:
        # training inputs are the state's full embedding matrix; rebound on load
        return {
            "kind": self.kind,
            "d": self.d,
            "n_neighbors": self.n_neighbors,
            "train_embedded": self.train_embedded.tolist(),
        }


def model_from_dict(d: dict, train_points: np.ndarray | None = None):
    """Rebuild a fitted reducer model from its serialized form."""
    if d["kind"] == "pca_like":
        return PcaModel(np.array(d["mean"]), np.array(d["components"]))
    if d["kind"] == "umap":
        if train_points is None:
            raise ValueError("umap model needs train_points to rebind")
        return NeighborEmbeddingModel(train_points, np.array(d["train_embedded"]),
                                      d["n_neighbors"])
    raise ValueError(f"unknown reducer kind {d['kind']!r}")


def _check_input(matrix: np.ndarray, cfg: ReducerConfig) -> np.ndarray:
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("matrix must be 2-dimensional")
    n, dim = x.shape
    if cfg.target_dim > dim:
        raise ValueError(f"target_dim {cfg.target_dim} exceeds input dimension {dim}")
    if n < 2:
        raise RankDeficient(f"need at least 2 rows, got {n}")
    if cfg.target_dim > n:
        raise ValueError(f"target_dim {cfg.target_dim} exceeds row count {n}")
    return x


def _fit_pca(x: np.ndarray, d: int) -> tuple[np.ndarray, PcaModel]:
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    nontrivial = int(np.sum(s > tol))
    if nontrivial < d:
        raise RankDeficient(f"{nontrivial} non-trivial components, need {d}")
    components = vt[:d].copy()
    # sign convention: largest-magnitude entry of each singular vector positive
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    model = PcaModel(mean, components)
    return centered @ components.T, model


def _fuzzy_graph(x: np.ndarray, n_neighbors: int) -> scipy.sparse.csr_matrix:
    """Symmetrized fuzzy k-NN membership graph."""
    n = x.shape[0]
    k = min(n_neighbors, n - 1)
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1) if n <= 1500 else None
    if d2 is not None:
        dists = np.sqrt(np.maximum(d2, 0.0))
    else:
        sq = np.sum(x * x, axis=1)
        dists = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0))
    np.fill_diagonal(dists, np.inf)
    knn_idx = np.argsort(dists, axis=1, kind="stable")[:, :k]
    knn_d = np.take_along_axis(dists, knn_idx, axis=1)

    target = np.log2(k) if k > 1 else 1.0
    rows, cols, vals = [], [], []
    for i in range(n):
        di = knn_d[i]
        rho = di[0]
        # binary search for the bandwidth reproducing the target neighbor mass
        lo, hi, sigma = 0.0, np.inf, 1.0
        for _ in range(64):
            mass = float(np.sum(np.exp(-np.maximum(di - rho, 0.0) / sigma)))
            if abs(mass - target) < 1e-5:
                break
            if mass > target:
                hi = sigma
                sigma = (lo + hi) / 2.0
            else:
                lo = sigma
                sigma = sigma * 2.0 if hi == np.inf else (lo + hi) / 2.0
        w = np.exp(-np.maximum(di - rho, 0.0) / max(sigma, 1e-12))
        rows.extend([i] * k)
        cols.extend(knn_idx[i].tolist())
        vals.extend(w.tolist())
    w = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    wt = w.T.tocsr()
    return (w + wt - w.multiply(wt)).tocsr()


def _spectral_init(graph: scipy.sparse.csr_matrix, d: int, seed: int) -> np.ndarray:
    n = graph.shape[0]
    deg = np.asarray(graph.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    lap = scipy.sparse.identity(n) - scipy.sparse.diags(inv_sqrt) @ graph @ scipy.sparse.diags(inv_sqrt)
    if n <= 2000:
        vals, vecs = np.linalg.eigh(lap.toarray())
        order = np.argsort(vals, kind="stable")
        emb = vecs[:, order[1:d + 1]]
    else:
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(n)
        vals, vecs = scipy.sparse.linalg.eigsh(lap.tocsc(), k=d + 1, which="SA", v0=v0)
        order = np.argsort(vals, kind="stable")
        emb = vecs[:, order[1:d + 1]]
    # fixed sign so eigensolver sign flips cannot change the result
    for j in range(emb.shape[1]):
        col = emb[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            emb[:, j] = -col
    scale = np.max(np.abs(emb))
    return emb / scale * 10.0 if scale > 0 else emb


def _fit_curve(min_dist: float) -> tuple[float, float]:
    """Least-squares (a, b) so 1/(1+a x^(2b)) tracks the min_dist falloff."""
    xv = np.linspace(0.0, 3.0, 300)
    yv = np.where(xv <= min_dist, 1.0, np.exp(-(xv - min_dist)))

    def f(x, a, b):
        return 1.0 / (1.0 + a * x ** (2.0 * b))

    (a, b), _ = scipy.optimize.curve_fit(f, xv, yv, p0=(1.0, 1.0), maxfev=5000)
    return float(a), float(b)


def _fit_neighbor_embedding(x: np.ndarray, cfg: ReducerConfig) -> tuple[np.ndarray, NeighborEmbeddingModel]:
    if float(np.max(np.abs(x - x[0]))) == 0.0:
        raise RankDeficient("all rows identical (zero variance)")
    graph = _fuzzy_graph(x, cfg.umap_n_neighbors)
    emb = _spectral_init(graph, cfg.target_dim, cfg.random_seed)
    a, b = _fit_curve(cfg.umap_min_dist)

    coo = scipy.sparse.triu(graph).tocoo()
    heads, tails, weights = coo.row, coo.col, coo.data
    n = x.shape[0]
    rng = np.random.default_rng(cfg.random_seed)
    for epoch in range(SGD_EPOCHS):
        alpha = 1.0 * (1.0 - epoch / SGD_EPOCHS)
        diff = emb[heads] - emb[tails]
        d2 = np.maximum(np.sum(diff * diff, axis=1), 1e-12)
        # attractive gradient of the low-dim membership along each edge
        grad_coef = (-2.0 * a * b * d2 ** (b - 1.0)) / (1.0 + a * d2 ** b)
        grad_coef = np.clip(grad_coef * weights, -4.0, 4.0)
        step = alpha * grad_coef[:, None] * diff
        np.add.at(emb, heads, step)
        np.add.at(emb, tails, -step)
        # repulsive updates against sampled non-neighbors
        for _ in range(NEGATIVE_SAMPLES):
            neg = rng.integers(0, n, size=heads.shape[0])
            diff = emb[heads] - emb[neg]
            d2 = np.sum(diff * diff, axis=1)
            rep = (2.0 * b) / ((0.001 + d2) * (1.0 + a * d2 ** b))
            rep = np.clip(rep * weights, -4.0, 4.0)
            np.add.at(emb, heads, alpha * rep[:, None] * diff)
    model = NeighborEmbeddingModel(x, emb, cfg.umap_n_neighbors)
    return emb.copy(), model


def fit_reduce(matrix, cfg: ReducerConfig):
    """Fit the reducer named by ``cfg`` and return (reduced N x d matrix, model).

    Raises:
        RankDeficient: fewer than d non-trivial components (N < 2 or
            zero-variance input).
    """
    x = _check_input(matrix, cfg)
    if cfg.kind == "pca_like":
        reduced, model = _fit_pca(x, cfg.target_dim)
    else:
        reduced, model = _fit_neighbor_embedding(x, cfg)
    if not np.all(np.isfinite(reduced)):
        raise RankDeficient("reduction produced non-finite values")
    return reduced, model


def transform(model, vectors) -> np.ndarray:
    """Apply a fitted reducer map to new vectors (rows)."""
    return model.transform(vectors)
