"""Feature-derived edge construction and the enriched graph.

Two complementary similarity structures are unioned with the original
topology: a cosine kNN graph (local) and complete digraphs inside spectral
clusters of the features (global). Full edge sets are computed once per
graph; training re-samples subsets each epoch, so the expensive spectral
step never repeats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import EdgeOrigin, Graph, coalesce, make_edges

DENSE_SOLVER_CAP = 5000


@dataclass
class EnrichConfig:
    k: int = 10
    clusters: int = 100
    gamma_knn: float = 0.1
    gamma_spec: float = 0.1
    kernel_bandwidth: object = "median"   # "median" or a positive float
    add_self_loops: bool = True
    solver_cap: int = DENSE_SOLVER_CAP

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.clusters < 2:
            raise ValueError("cluster count must be >= 2")
        for name in ("gamma_knn", "gamma_spec"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.kernel_bandwidth != "median" and not (
                isinstance(self.kernel_bandwidth, (int, float))
                and self.kernel_bandwidth > 0):
            raise ValueError("kernel_bandwidth must be 'median' or positive")


@dataclass(frozen=True)
class EnrichedGraph:
    """A base graph plus the coalesced union of feature-derived edges.

    Self-loops, when enabled, occupy a contiguous tail (one per node); they
    are bookkeeping for attention, not scorable structure.
    """

    base: Graph
    enriched_edges: np.ndarray
    self_loop_start: int

    @property
    def num_scorable(self) -> int:
        return self.self_loop_start

    @property
    def edges(self) -> np.ndarray:
        return self.enriched_edges


def knn_edges(X: np.ndarray, k: int) -> np.ndarray:
    """Directed edges (i, j) to each node's k most cosine-similar peers.

    Ties break toward the lowest index; all-zero feature rows have
    similarity 0 to everything.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two nodes")
    if k >= n:
        raise ValueError(f"k too large: k={k} with {n} nodes")
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = X / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    np.fill_diagonal(sim, -np.inf)
    # stable ties: sort by (-similarity, column index)
    cols = np.broadcast_to(np.arange(n), (n, n))
    order = np.lexsort((cols, -sim), axis=1)
    targets = order[:, :k]
    src = np.repeat(np.arange(n), k)
    return make_edges(np.column_stack([src, targets.reshape(-1)]),
                      EdgeOrigin.KNN)


def _median_pairwise_distance(X: np.ndarray) -> float:
    diff = X[:, None, :] - X[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    iu = np.triu_indices(X.shape[0], k=1)
    return float(np.median(dist[iu]))


def _kmeans_pp_init(emb: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = emb.shape[0]
    centers = np.empty((k, emb.shape[1]))
    centers[0] = emb[rng.integers(n)]
    d2 = ((emb - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = emb[rng.integers(n)]
            continue
        probs = d2 / total
        centers[j] = emb[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((emb - centers[j]) ** 2).sum(axis=1))
    return centers


def _kmeans(emb: np.ndarray, k: int, rng: np.random.Generator,
            max_iter: int = 100) -> np.ndarray:
    centers = _kmeans_pp_init(emb, k, rng)
    assign = np.zeros(emb.shape[0], dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((emb[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for j in range(k):
            members = new_assign == j
            if members.any():
                centers[j] = emb[members].mean(axis=0)
            else:
                # re-seed an empty cluster from the farthest point
                far = d2.min(axis=1).argmax()
                centers[j] = emb[far]
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def spectral_edges(X: np.ndarray, clusters: int,
                   bandwidth="median",
                   rng: Optional[np.random.Generator] = None,
                   solver_cap: int = DENSE_SOLVER_CAP) -> np.ndarray:
    """All directed intra-cluster pairs after spectral clustering of X.

    RBF affinity with a median-distance bandwidth by default, symmetric
    normalized Laplacian, eigenvectors of the smallest eigenvalues,
    row-normalized embedding, then seeded k-means.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < clusters:
        raise ValueError(f"need at least {clusters} nodes, got {n}")
    if n > solver_cap:
        raise ValueError(
            f"{n} nodes exceeds the dense eigensolver cap ({solver_cap})"
        )
    rng = rng or np.random.default_rng()
    if bandwidth == "median":
        zeta = _median_pairwise_distance(X)
        if zeta <= 0:
            zeta = 1.0
    else:
        zeta = float(bandwidth)
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    affinity = np.exp(-sq / (2.0 * zeta * zeta))
    deg = affinity.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]
    try:
        eigvals, eigvecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"eigendecomposition failed: {exc}") from exc
    # Eigenvalue 1 marks kernel-null directions (the RBF kernel is PSD, so
    # the normalized affinity spectrum lives in [0, 1]). Their eigenvectors
    # are an arbitrary orthonormal basis carrying no similarity structure;
    # keeping them would split degenerate inputs on solver noise.
    informative = eigvals[:clusters] < 1.0 - 1e-10
    emb = eigvecs[:, :clusters][:, informative]
    if emb.shape[1] == 0:
        emb = eigvecs[:, :1]
    row_norm = np.linalg.norm(emb, axis=1)
    emb = emb / np.where(row_norm > 0, row_norm, 1.0)[:, None]
    assign = _kmeans(emb, clusters, rng)
    pairs = []
    for c in np.unique(assign):
        members = np.flatnonzero(assign == c)
        if members.size < 2:
            continue
        src = np.repeat(members, members.size)
        dst = np.tile(members, members.size)
        keep = src != dst
        pairs.append(np.column_stack([src[keep], dst[keep]]))
    if not pairs:
        return np.empty((0, 3), dtype=np.int64)
    return make_edges(np.vstack(pairs), EdgeOrigin.SPECTRAL)


def sample_edges(edges: np.ndarray, ratio: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of floor(ratio * |edges|) edges."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    if ratio >= 1.0:
        return edges
    take = int(np.floor(ratio * edges.shape[0]))
    if take == 0:
        return edges[:0]
    idx = rng.choice(edges.shape[0], size=take, replace=False)
    return edges[np.sort(idx)]


class Enricher:
    """Per-graph cache of the full kNN and spectral edge sets.

    Construction pays the quadratic/cubic precomputation once; `sample`
    draws fresh subsets, coalesces them against the original edges and
    appends self-loops.
    """

    def __init__(self, g: Graph, cfg: EnrichConfig, rng: np.random.Generator):
        self.graph = g
        self.cfg = cfg
        self.full_knn = (knn_edges(g.features, cfg.k)
                         if cfg.gamma_knn > 0 else np.empty((0, 3), np.int64))
        self.full_spectral = (
            spectral_edges(g.features, cfg.clusters, cfg.kernel_bandwidth,
                           rng, cfg.solver_cap)
            if cfg.gamma_spec > 0 else np.empty((0, 3), np.int64))

    def sample(self, rng: np.random.Generator) -> EnrichedGraph:
        cfg = self.cfg
        g = self.graph
        parts = [g.edges,
                 sample_edges(self.full_knn, cfg.gamma_knn, rng),
                 sample_edges(self.full_spectral, cfg.gamma_spec, rng)]
        union = np.vstack([p for p in parts if p.size])
        if union.size:
            union = union[union[:, 0] != union[:, 1]]   # loops live in the tail
        merged = coalesce(union) if union.size else np.empty((0, 3), np.int64)
        start = merged.shape[0]
        if cfg.add_self_loops:
            loops = make_edges([(i, i) for i in range(g.num_nodes)],
                               EdgeOrigin.SELF_LOOP)
            merged = np.vstack([merged, loops]) if merged.size else loops
        return EnrichedGraph(base=g, enriched_edges=merged,
                             self_loop_start=start)


def enrich(g: Graph, cfg: EnrichConfig, rng: np.random.Generator) -> EnrichedGraph:
    """One-shot enrichment: precompute full sets, sample once."""
    return Enricher(g, cfg, rng).sample(rng)
