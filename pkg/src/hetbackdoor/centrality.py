"""Centrality measures on metapath projections and trigger-node selection.

All measures take a symmetric 0/1 adjacency. Betweenness is exact Brandes
over unordered pairs, unnormalized, so scores on unweighted graphs are
integers (halves cancel) and arg-extrema are stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compute import ShapeError, SparseMatrix
from .hetgraph import HeteroGraph, NodeRef
from .metapath import Metapath, extract_subgraph

MEASURES = ("degree", "betweenness", "closeness", "eigenvector", "pagerank")


@dataclass(frozen=True)
class CentralityScores:
    measure: str
    scores: np.ndarray
    metapaths: tuple[str, ...]


def _check_square(adj: SparseMatrix) -> int:
    n, m = adj.shape
    if n != m:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    return n


def _bfs_levels(a, n: int, s: int):
    """Level sets, distances, and shortest-path counts from one source."""
    dist = np.full(n, -1, dtype=np.int64)
    sigma = np.zeros(n)
    dist[s] = 0
    sigma[s] = 1.0
    levels = []
    frontier = np.asarray([s], dtype=np.int64)
    d = 0
    while frontier.size:
        levels.append(frontier)
        f = np.zeros(n)
        f[frontier] = sigma[frontier]
        reach = a @ f
        d += 1
        new = np.flatnonzero((reach > 0) & (dist < 0))
        sigma[new] = reach[new]
        dist[new] = d
        frontier = new
    return levels, dist, sigma


def betweenness(adj: SparseMatrix) -> np.ndarray:
    n = _check_square(adj)
    a = adj.binarized().csr
    bc = np.zeros(n)
    for s in range(n):
        levels, dist, sigma = _bfs_levels(a, n, s)
        delta = np.zeros(n)
        for k in range(len(levels) - 1, 0, -1):
            coef = np.zeros(n)
            coef[levels[k]] = (1.0 + delta[levels[k]]) / sigma[levels[k]]
            spread = a @ coef
            prev = levels[k - 1]
            delta[prev] += sigma[prev] * spread[prev]
        delta[s] = 0.0
        bc += delta
    return bc / 2.0


def degree(adj: SparseMatrix) -> np.ndarray:
    _check_square(adj)
    return np.asarray(adj.binarized().csr.sum(axis=1)).ravel()


def closeness(adj: SparseMatrix) -> np.ndarray:
    """(|component|-1) / sum of distances within the component; isolated -> 0."""
    n = _check_square(adj)
    a = adj.binarized().csr
    out = np.zeros(n)
    for s in range(n):
        _, dist, _ = _bfs_levels(a, n, s)
        reached = dist > 0
        if reached.any():
            out[s] = reached.sum() / dist[reached].sum()
    return out


def eigenvector(adj: SparseMatrix, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    n = _check_square(adj)
    a = adj.binarized().csr
    x = np.full(n, 1.0 / np.sqrt(n))
    for _ in range(max_iter):
        y = a @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return np.zeros(n)
        y /= norm
        if np.max(np.abs(y - x)) < tol:
            return y
        x = y
    return x


def pagerank(adj: SparseMatrix, damping: float = 0.85, tol: float = 1e-10,
             max_iter: int = 1000) -> np.ndarray:
    n = _check_square(adj)
    a = adj.binarized().csr
    deg = np.asarray(a.sum(axis=1)).ravel()
    dangling = deg == 0
    inv = np.zeros(n)
    inv[~dangling] = 1.0 / deg[~dangling]
    x = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        spread = a.T @ (x * inv)
        nxt = (1.0 - damping) / n + damping * (spread + x[dangling].sum() / n)
        if np.abs(nxt - x).sum() < tol:
            return nxt
        x = nxt
    return x


_DISPATCH = {
    "degree": degree,
    "betweenness": betweenness,
    "closeness": closeness,
    "eigenvector": eigenvector,
    "pagerank": pagerank,
}


def compute_scores(adj: SparseMatrix, measure: str) -> np.ndarray:
    try:
        fn = _DISPATCH[measure]
    except KeyError:
        raise ValueError(f"unknown centrality measure {measure!r}") from None
    return fn(adj)


def projection_union(graph: HeteroGraph, metapaths: Sequence[Metapath]) -> SparseMatrix:
    adj = extract_subgraph(graph, metapaths[0]).adjacency
    for p in metapaths[1:]:
        adj = adj.maximum(extract_subgraph(graph, p).adjacency)
    return adj.binarized()


def score_trigger_candidates(graph: HeteroGraph, metapaths: Metapath | Sequence[Metapath],
                             measure: str = "betweenness") -> CentralityScores:
    paths = [metapaths] if isinstance(metapaths, Metapath) else list(metapaths)
    if not paths:
        raise ValueError("need at least one metapath")
    for p in paths:
        if p.node_types[0] != graph.target_type or not p.symmetric_endpoints():
            raise ValueError(f"{p.name}: trigger selection needs target-type endpoints")
    adj = projection_union(graph, paths)
    return CentralityScores(measure, compute_scores(adj, measure),
                            tuple(p.name for p in paths))


def select_trigger_node(graph: HeteroGraph, metapaths: Metapath | Sequence[Metapath],
                        measure: str = "betweenness", mode: str = "min") -> NodeRef:
    """Arg-extremum of the chosen measure on the metapath projection.

    Ties break toward the smallest node index. Passing several metapaths
    scores the union of their projections instead of a single one.
    """
    if graph.target_count == 0:
        raise ValueError("empty target type")
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    scored = score_trigger_candidates(graph, metapaths, measure)
    idx = int(np.argmin(scored.scores) if mode == "min" else np.argmax(scored.scores))
    return NodeRef(graph.target_type, idx)
