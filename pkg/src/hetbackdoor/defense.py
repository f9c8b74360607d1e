"""Data-level defenses: similarity pruning over metapath projections.

``prune`` marks every projected edge whose endpoint features fall below a
cosine-similarity threshold and severs all metapath instances behind each
marked pair by deleting bridging heterogeneous edges at the cut closest to
the lower-indexed endpoint. ``prune_ld`` additionally withdraws the observed
labels of both endpoints of every marked pair from training supervision.

The defender does not know which metapath carries the attack, so the default
candidate set enumerates all symmetric-endpoint metapaths over the target
type up to a length cap; an oracle caller can pass the true backdoor metapath
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hetgraph import HeteroGraph, build_graph
from .metapath import Metapath, MetapathError, extract_subgraph, step_matrices


@dataclass(frozen=True)
class DefenseReport:
    threshold: float
    marked_pairs: dict[str, tuple[tuple[int, int], ...]]  # metapath name -> (u, w), u < w
    deleted_edges: tuple[tuple[int, int, int], ...]       # (relation, src, dst)
    discarded_labels: tuple[tuple[int, int], ...]         # (node, previous label)

    @property
    def num_marked(self) -> int:
        return sum(len(v) for v in self.marked_pairs.values())


def candidate_defense_metapaths(graph: HeteroGraph, max_len: int = 5,
                                max_count: int = 64) -> list[Metapath]:
    """All distinct target-to-target metapaths of length <= max_len."""
    schema = graph.schema
    t = graph.target_type
    steps_from: dict[int, list[tuple[int, bool, int]]] = {}
    for a in range(len(schema.node_types)):
        opts = []
        for rid, rel in enumerate(schema.relations):
            if rel.src_type == a:
                opts.append((rid, True, rel.dst_type))
            if rel.dst_type == a and rel.src_type != rel.dst_type:
                opts.append((rid, False, rel.src_type))
        steps_from[a] = opts

    found: list[Metapath] = []
    stack: list[tuple[tuple[int, ...], tuple[int, ...], tuple[bool, ...]]] = [((t,), (), ())]
    while stack and len(found) < max_count:
        types, rels, dirs = stack.pop(0)
        if len(rels) >= 1 and types[-1] == t:
            name = "-".join(schema.node_types[a].name for a in types)
            found.append(Metapath(types, rels, dirs, name))
        if len(rels) < max_len:
            for rid, fwd, nxt in steps_from[types[-1]]:
                stack.append((types + (nxt,), rels + (rid,), dirs + (fwd,)))
    return found


def _cosine(x: np.ndarray, y: np.ndarray) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def _mark_pairs(graph: HeteroGraph, p: Metapath, threshold: float) -> list[tuple[int, int]]:
    proj = extract_subgraph(graph, p)
    pairs = proj.adjacency.pairs()
    feats = proj.features
    marked = []
    for u, w in pairs[pairs[:, 0] < pairs[:, 1]]:
        if _cosine(feats[u], feats[w]) < threshold:
            marked.append((int(u), int(w)))
    marked.sort()
    return marked


def _bridging_edges(graph: HeteroGraph, p: Metapath, u: int, w: int,
                    all_cuts: bool) -> set[tuple[int, int, int]]:
    """Heterogeneous edges carrying u~w instances, in stored orientation.

    Default keeps only the first-step edges (cut closest to u); ``all_cuts``
    expands to every edge of every instance.
    """
    mats = step_matrices(graph, p)
    l = p.length

    prefix = [None] * l
    vec = np.zeros(graph.num_nodes(p.node_types[0]), dtype=bool)
    vec[u] = True
    prefix[0] = vec
    for i in range(1, l):
        prefix[i] = (mats[i - 1].csr.T @ prefix[i - 1].astype(np.float64)) > 0

    suffix = [None] * l  # suffix[i]: nodes of type node_types[i+1] reaching w
    vec = np.zeros(graph.num_nodes(p.node_types[-1]), dtype=bool)
    vec[w] = True
    suffix[l - 1] = vec
    for i in range(l - 2, -1, -1):
        suffix[i] = (mats[i + 1].csr @ suffix[i + 1].astype(np.float64)) > 0

    cuts = range(l) if all_cuts else (0,)
    out: set[tuple[int, int, int]] = set()
    for i in cuts:
        xs = np.flatnonzero(prefix[i])
        step = mats[i]
        for x in xs:
            ys = step.row(int(x))
            ys = ys[suffix[i][ys]]
            for y in ys:
                rid = p.relations[i]
                s, d = (int(x), int(y)) if p.forward[i] else (int(y), int(x))
                out.add((rid, s, d))
    return out


def _delete_edges(graph: HeteroGraph, deletions: set[tuple[int, int, int]]) -> HeteroGraph:
    new_edges = []
    for rid, e in enumerate(graph.edges):
        if not e.size:
            new_edges.append(e)
            continue
        keep = np.asarray([(rid, int(s), int(d)) not in deletions for s, d in e])
        new_edges.append(e[keep])
    return build_graph(graph.schema, graph.features, new_edges, graph.labels,
                       graph.target_type, graph.num_classes)


def prune(graph: HeteroGraph, metapaths: list[Metapath], threshold: float,
          all_instance_edges: bool = False) -> tuple[HeteroGraph, DefenseReport]:
    """Delete the heterogeneous edges behind dissimilar projected pairs."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"cosine threshold must be in [-1, 1], got {threshold}")
    for p in metapaths:
        if not p.symmetric_endpoints():
            raise MetapathError(f"{p.name}: pruning needs symmetric endpoints")

    marked: dict[str, tuple[tuple[int, int], ...]] = {}
    deletions: set[tuple[int, int, int]] = set()
    for p in metapaths:
        pairs = _mark_pairs(graph, p, threshold)
        marked[p.name] = tuple(pairs)
        for u, w in pairs:
            deletions |= _bridging_edges(graph, p, u, w, all_instance_edges)

    pruned = _delete_edges(graph, deletions) if deletions else graph
    report = DefenseReport(threshold, marked, tuple(sorted(deletions)), ())
    return pruned, report


def prune_ld(graph: HeteroGraph, metapaths: list[Metapath], threshold: float,
             all_instance_edges: bool = False) -> tuple[HeteroGraph, DefenseReport]:
    """Prune, then drop the observed labels of every marked pair's endpoints."""
    pruned, report = prune(graph, metapaths, threshold, all_instance_edges)
    discard: set[int] = set()
    for p in metapaths:
        if p.node_types[0] != graph.target_type:
            continue
        for u, w in report.marked_pairs[p.name]:
            discard.update((u, w))
    discarded = tuple(
        (i, int(graph.labels[i])) for i in sorted(discard) if graph.labels[i] >= 0
    )
    if discarded:
        pruned = pruned.with_labels_set([(i, -1) for i, _ in discarded])
    return pruned, DefenseReport(report.threshold, report.marked_pairs,
                                 report.deleted_edges, discarded)
