"""Metapath composition, projection, and single-edge completion.

A metapath is an alternating sequence of node types and relations. Relations
may be traversed against their declared direction (the schema stores ``P-A``
once; the path PAP walks it both ways). Composition is boolean reachability:
an entry (u, w) means at least one walk instance connects u to w, and
self-instances (u == w) are dropped for same-type endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compute import SparseMatrix
from .hetgraph import GraphFormatError, HeteroGraph, NodeRef, Schema


class MetapathError(ValueError):
    """Metapath is malformed or incompatible with the schema."""


class AlreadyConnectedError(ValueError):
    """Completion requested for a pair that is already metapath-connected."""


@dataclass(frozen=True)
class Metapath:
    node_types: tuple[int, ...]
    relations: tuple[int, ...]
    forward: tuple[bool, ...]  # per step, True = traversed as declared
    name: str

    def __post_init__(self):
        if len(self.node_types) != len(self.relations) + 1 or not self.relations:
            raise MetapathError("need l relations and l+1 node types, l >= 1")

    @property
    def length(self) -> int:
        return len(self.relations)

    def symmetric_endpoints(self) -> bool:
        return self.node_types[0] == self.node_types[-1]

    def validate(self, schema: Schema) -> None:
        for step, (rel_id, fwd) in enumerate(zip(self.relations, self.forward)):
            rel = schema.relations[rel_id]
            a, b = self.node_types[step], self.node_types[step + 1]
            src, dst = (rel.src_type, rel.dst_type) if fwd else (rel.dst_type, rel.src_type)
            if (a, b) != (src, dst):
                raise MetapathError(
                    f"{self.name}: step {step} uses relation {rel.name!r} "
                    f"between incompatible types"
                )


def _steps_between(schema: Schema, a: int, b: int) -> list[tuple[int, bool]]:
    out = []
    for rid, rel in enumerate(schema.relations):
        if rel.src_type == a and rel.dst_type == b:
            out.append((rid, True))
        if rel.dst_type == a and rel.src_type == b and rel.src_type != rel.dst_type:
            out.append((rid, False))
    return out


def parse_metapath(schema: Schema, text: str) -> Metapath:
    """Parse ``T1-T2-...`` against schema type names.

    When more than one relation links a consecutive type pair, disambiguate
    with a bracketed relation name between them, e.g. ``P-[PA]-A-[PA]-P``.
    """
    tokens = [t for t in text.split("-") if t]
    types: list[int] = []
    annotations: list[str | None] = []
    pending: str | None = None
    for tok in tokens:
        if tok.startswith("[") and tok.endswith("]"):
            if pending is not None or not types:
                raise MetapathError(f"misplaced relation annotation in {text!r}")
            pending = tok[1:-1]
        else:
            types.append(schema.type_id(tok))
            if len(types) > 1:
                annotations.append(pending)
            pending = None
    if pending is not None:
        raise MetapathError(f"trailing relation annotation in {text!r}")
    if len(types) < 2:
        raise MetapathError(f"metapath {text!r} needs at least two node types")

    rels: list[int] = []
    dirs: list[bool] = []
    for (a, b), ann in zip(zip(types, types[1:]), annotations):
        cands = _steps_between(schema, a, b)
        if ann is not None:
            cands = [(r, f) for r, f in cands if schema.relations[r].name == ann]
        if not cands:
            raise MetapathError(f"{text!r}: no relation connects the pair at step {len(rels)}")
        if len(cands) > 1:
            names = sorted({schema.relations[r].name for r, _ in cands})
            raise MetapathError(
                f"{text!r}: ambiguous step {len(rels)}; annotate with one of {names}"
            )
        rels.append(cands[0][0])
        dirs.append(cands[0][1])
    p = Metapath(tuple(types), tuple(rels), tuple(dirs), text)
    p.validate(schema)
    return p


@dataclass(frozen=True)
class EdgeSpec:
    """One typed edge in schema orientation, plus the traversal direction."""

    relation: int
    src: NodeRef
    dst: NodeRef
    forward: bool

    def pair(self) -> tuple[int, int]:
        return (self.src.index, self.dst.index)


# ---------------------------------------------------------------------------
# Composition


def relation_adjacency(graph: HeteroGraph, rel_id: int, forward: bool = True) -> SparseMatrix:
    key = ("rel_adj", rel_id, forward)
    cached = graph._cache.get(key)
    if cached is not None:
        return cached
    rel = graph.schema.relations[rel_id]
    n_src, n_dst = graph.num_nodes(rel.src_type), graph.num_nodes(rel.dst_type)
    adj = SparseMatrix.from_pairs(graph.edges[rel_id], (n_src, n_dst)).binarized()
    if not forward:
        adj = adj.transpose()
    graph._cache[key] = adj
    return adj


def step_matrices(graph: HeteroGraph, p: Metapath) -> list[SparseMatrix]:
    return [relation_adjacency(graph, r, f) for r, f in zip(p.relations, p.forward)]


def compose_adjacency(graph: HeteroGraph, p: Metapath) -> SparseMatrix:
    """Boolean reachability over the composite relation; no self-instances."""
    p.validate(graph.schema)
    mats = step_matrices(graph, p)
    out = mats[0]
    for m in mats[1:]:
        out = out.matmul_sparse(m).binarized()
    if p.symmetric_endpoints():
        out = out.without_diagonal()
    return out.binarized()


@dataclass(frozen=True)
class Projection:
    """Homogeneous view of one node type through a metapath."""

    adjacency: SparseMatrix  # symmetric 0/1
    features: np.ndarray
    node_type: int


def extract_subgraph(graph: HeteroGraph, p: Metapath) -> Projection:
    if not p.symmetric_endpoints():
        raise MetapathError(f"{p.name}: projection needs equal endpoint types")
    adj = compose_adjacency(graph, p)
    adj = adj.maximum(adj.transpose()).binarized()
    t = p.node_types[0]
    return Projection(adj, graph.features[t], t)


def _push(vec: np.ndarray, m: SparseMatrix) -> np.ndarray:
    return (m.csr.T @ vec) > 0


def _pull(vec: np.ndarray, m: SparseMatrix) -> np.ndarray:
    return (m.csr @ vec) > 0


def is_connected_via(graph: HeteroGraph, u: NodeRef, v: NodeRef, p: Metapath) -> bool:
    if u.type_id != p.node_types[0] or v.type_id != p.node_types[-1]:
        raise MetapathError("endpoint node types do not match the metapath")
    if u == v:
        return False
    vec = np.zeros(graph.num_nodes(u.type_id), dtype=bool)
    vec[u.index] = True
    for m in step_matrices(graph, p):
        vec = _push(vec.astype(np.float64), m)
        if not vec.any():
            return False
    return bool(vec[v.index])


def single_edge_completion(graph: HeteroGraph, v_p: NodeRef, v_t: NodeRef,
                           p: Metapath) -> EdgeSpec | None:
    """Smallest single edge whose addition links v_p to v_t along p.

    Scans cut positions left to right; at each cut the candidate edge joins a
    prefix-reachable node to a suffix-reachable node. Ties break on the
    lexicographically smallest (cut, src-side index, dst-side index). Returns
    None when no single edge can bridge the pair.
    """
    if v_p.type_id != p.node_types[0] or v_t.type_id != p.node_types[-1]:
        raise MetapathError("endpoint node types do not match the metapath")
    if v_p == v_t:
        raise ValueError("cannot complete a metapath from a node to itself")
    if is_connected_via(graph, v_p, v_t, p):
        raise AlreadyConnectedError(f"{v_p} already reaches {v_t} via {p.name}")

    mats = step_matrices(graph, p)
    l = p.length

    prefix: list[np.ndarray] = []
    vec = np.zeros(graph.num_nodes(p.node_types[0]), dtype=bool)
    vec[v_p.index] = True
    prefix.append(vec)
    for i in range(l - 1):
        vec = _push(vec.astype(np.float64), mats[i])
        prefix.append(vec)

    suffix: list[np.ndarray] = [None] * l  # suffix[i]: type node_types[i+1] reaching v_t
    vec = np.zeros(graph.num_nodes(p.node_types[-1]), dtype=bool)
    vec[v_t.index] = True
    suffix[l - 1] = vec
    for i in range(l - 2, -1, -1):
        vec = _pull(vec.astype(np.float64), mats[i + 1])
        suffix[i] = vec

    for i in range(l):
        xs = np.flatnonzero(prefix[i])
        ys = np.flatnonzero(suffix[i])
        if xs.size == 0 or ys.size == 0:
            continue
        step = relation_adjacency(graph, p.relations[i], p.forward[i])
        for x in xs:
            existing = set(step.row(int(x)))
            for y in ys:
                if int(y) in existing:
                    continue  # cannot happen when the pair is disconnected
                rel = graph.schema.relations[p.relations[i]]
                if p.forward[i]:
                    src = NodeRef(rel.src_type, int(x))
                    dst = NodeRef(rel.dst_type, int(y))
                else:
                    src = NodeRef(rel.src_type, int(y))
                    dst = NodeRef(rel.dst_type, int(x))
                return EdgeSpec(p.relations[i], src, dst, p.forward[i])
    return None


def attach_edge(graph: HeteroGraph, e: EdgeSpec) -> HeteroGraph:
    """Add one typed edge, returning a new graph; duplicates are rejected."""
    rel = graph.schema.relations[e.relation]
    if e.src.type_id != rel.src_type or e.dst.type_id != rel.dst_type:
        raise GraphFormatError(f"edge endpoints do not match relation {rel.name!r}")
    if not (0 <= e.src.index < graph.num_nodes(rel.src_type)
            and 0 <= e.dst.index < graph.num_nodes(rel.dst_type)):
        raise GraphFormatError(f"edge endpoint out of range for relation {rel.name!r}")
    if graph.has_edge(e.relation, e.src.index, e.dst.index):
        raise GraphFormatError(
            f"duplicate edge ({e.src.index}, {e.dst.index}) in relation {rel.name!r}"
        )
    return graph.with_added_edges(e.relation, [e.pair()])
