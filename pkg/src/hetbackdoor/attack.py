"""Relation-based backdoor poisoning, activation strategies, and subgraph baselines.

The relation-based attack wires each poisoned training node to one fixed
trigger node through a single new edge completing the backdoor metapath, then
flips the node's label to the target class: zero injected nodes, one edge per
poisoned node. Activation at test time either connects an attacker-controlled
node the same way (self-node) or injects a feature-replica of the trigger
node next to an arbitrary victim (indiscriminate).

The subgraph baselines ("sba-sample" / "sba-gen") inject, per poisoned node, a
size-3 Erdős-Rényi trigger over target-type nodes, heterogenized by routing
every trigger edge through fresh intermediate nodes along the backdoor
metapath. Trigger node features are sampled rows of the clean feature matrix
(sample) or Gaussian draws matching its per-dimension moments (gen).

All budget arithmetic counts injected nodes plus injected edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .hetgraph import DataSplit, HeteroGraph, NodeRef
from .metapath import (AlreadyConnectedError, EdgeSpec, Metapath, attach_edge,
                       is_connected_via, parse_metapath, single_edge_completion)
from .models import (ModelConfig, TrainConfig, TrainedModel, TrainingDivergence,
                     evaluate, get_metapath_attention, train)

RELATION_VARIANT = "hgba"
SBA_VARIANTS = ("sba-sample", "sba-gen")


class PoisoningError(ValueError):
    pass


class ActivationError(ValueError):
    pass


@dataclass(frozen=True)
class BudgetConfig:
    """Budget as a fraction of training-set nodes plus training-share of edges."""

    fraction: float = 0.01
    cap: int | None = None

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"budget fraction must be in (0, 1], got {self.fraction}")
        if self.cap is not None and self.cap <= 0:
            raise ValueError("budget cap must be positive")


def budget_units(graph: HeteroGraph, split: DataSplit, budget: BudgetConfig) -> int:
    """Total injectable nodes+edges. Training-set edges are approximated as
    (train fraction) x (total heterogeneous edges)."""
    n_train = int(split.train.size)
    train_frac = n_train / graph.target_count
    denom = n_train + train_frac * graph.total_edges()
    units = int(np.floor(budget.fraction * denom))
    if budget.cap is not None:
        units = min(units, budget.cap)
    return units


@dataclass(frozen=True)
class PoisonPlan:
    variant: str
    metapath: Metapath
    target_class: int
    poisoned: tuple[NodeRef, ...]
    added_edges: tuple[EdgeSpec, ...]
    nodes_added: int
    edges_added: int
    seed: int
    trigger_node: NodeRef | None = None            # relation variant only
    trigger_size: int = 3                          # sba variants
    er_prob: float = 0.8
    clean_counts: tuple[int, ...] = field(default=())

    @property
    def budget_spent(self) -> int:
        return self.nodes_added + self.edges_added

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "metapath": self.metapath.name,
            "target_class": self.target_class,
            "trigger_node": None if self.trigger_node is None else list(self.trigger_node),
            "poisoned": [list(n) for n in self.poisoned],
            "added_edges": [
                [e.relation, e.src.type_id, e.src.index, e.dst.type_id, e.dst.index,
                 int(e.forward)]
                for e in self.added_edges
            ],
            "ledger": {"nodes_added": self.nodes_added, "edges_added": self.edges_added},
            "seed": self.seed,
            "trigger_size": self.trigger_size,
            "er_prob": self.er_prob,
            "clean_counts": list(self.clean_counts),
        }

    @classmethod
    def from_dict(cls, d: dict, graph: HeteroGraph) -> "PoisonPlan":
        trig = d["trigger_node"]
        return cls(
            variant=d["variant"],
            metapath=parse_metapath(graph.schema, d["metapath"]),
            target_class=int(d["target_class"]),
            poisoned=tuple(NodeRef(*n) for n in d["poisoned"]),
            added_edges=tuple(
                EdgeSpec(r, NodeRef(st, si), NodeRef(dt, di), bool(f))
                for r, st, si, dt, di, f in d["added_edges"]
            ),
            nodes_added=int(d["ledger"]["nodes_added"]),
            edges_added=int(d["ledger"]["edges_added"]),
            seed=int(d["seed"]),
            trigger_node=None if trig is None else NodeRef(*trig),
            trigger_size=int(d["trigger_size"]),
            er_prob=float(d["er_prob"]),
            clean_counts=tuple(d["clean_counts"]),
        )


# ---------------------------------------------------------------------------
# Backdoor metapath selection (proxy models)


def select_backdoor_metapath(graph: HeteroGraph, candidates: Sequence[Metapath],
                             proxy: str, split: DataSplit, seed: int,
                             hidden: int = 64,
                             train_cfg: TrainConfig | None = None) -> Metapath:
    """Most classification-relevant candidate, judged by a proxy model.

    ``homo-gnn`` trains one gcn per candidate projection and takes the best
    validation Micro-F1; ``hgnn`` trains han once over all candidates and
    takes the largest semantic attention weight. Ties keep list order.
    """
    if not candidates:
        raise ValueError("need at least one candidate metapath")
    for p in candidates:
        if not p.symmetric_endpoints() or p.node_types[0] != graph.target_type:
            raise ValueError(f"{p.name}: backdoor metapaths need target-type endpoints")
    if len(candidates) == 1:
        return candidates[0]
    train_cfg = train_cfg or TrainConfig()

    if proxy == "homo-gnn":
        best: tuple[float, Metapath] | None = None
        failures = []
        for p in candidates:
            cfg = ModelConfig("gcn", (p,), hidden=hidden, seed=seed)
            try:
                model = train(cfg, train_cfg, graph, split)
            except TrainingDivergence as exc:
                failures.append((p.name, exc))
                continue
            score = evaluate(model, graph, split.val)[0] if split.val.size else \
                evaluate(model, graph, split.train)[0]
            if best is None or score > best[0]:
                best = (score, p)
        if best is None:
            raise TrainingDivergence(f"every proxy run diverged: {failures}")
        return best[1]

    if proxy == "hgnn":
        cfg = ModelConfig("han", tuple(candidates), hidden=hidden, seed=seed)
        model = train(cfg, train_cfg, graph, split)
        weights = get_metapath_attention(model)
        best_p = candidates[0]
        for p in candidates[1:]:
            if weights[p.name] > weights[best_p.name]:
                best_p = p
        return best_p

    raise ValueError(f"unknown proxy kind {proxy!r} (want 'homo-gnn' or 'hgnn')")


# ---------------------------------------------------------------------------
# Relation-based poisoning


def identify_poisoned_nodes(graph: HeteroGraph, v_t: NodeRef, p_b: Metapath,
                            budget: BudgetConfig, split: DataSplit, seed: int,
                            y_t: int) -> list[NodeRef]:
    """Seeded uniform draw of poisonable training nodes, sized by the budget.

    Eligible nodes are training nodes other than the trigger node whose true
    label differs from the target class, that do not already reach the
    trigger node along the backdoor metapath, and that stay completable while
    earlier picks attach their edges (shared intermediates can pre-connect a
    later pick, which disqualifies it).
    """
    quota = budget_units(graph, split, budget)
    if quota <= 0:
        raise PoisoningError("empty poison set: budget floors to zero nodes")
    t = graph.target_type
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9015]))
    order = rng.permutation(split.train)

    chosen: list[NodeRef] = []
    scratch = graph
    for idx in order:
        if len(chosen) >= quota:
            break
        idx = int(idx)
        if idx == v_t.index or graph.labels[idx] == y_t:
            continue
        node = NodeRef(t, idx)
        if is_connected_via(scratch, node, v_t, p_b):
            continue
        edge = single_edge_completion(scratch, node, v_t, p_b)
        if edge is None:
            continue
        scratch = attach_edge(scratch, edge)
        chosen.append(node)
    if not chosen:
        raise PoisoningError("empty poison set: no eligible training node")
    return chosen


def poison(graph: HeteroGraph, v_t: NodeRef, p_b: Metapath,
           poisoned: Sequence[NodeRef], y_t: int) -> tuple[HeteroGraph, PoisonPlan]:
    """Attach one completion edge per poisoned node and relabel it to y_t."""
    out = graph
    edges: list[EdgeSpec] = []
    for node in poisoned:
        try:
            edge = single_edge_completion(out, node, v_t, p_b)
        except AlreadyConnectedError as exc:
            raise PoisoningError(f"{node} is already connected: {exc}") from exc
        if edge is None:
            raise PoisoningError(f"{node} admits no single-edge completion")
        out = attach_edge(out, edge)
        edges.append(edge)
    out = out.with_labels_set([(n.index, y_t) for n in poisoned])
    plan = PoisonPlan(
        variant=RELATION_VARIANT,
        metapath=p_b,
        target_class=y_t,
        poisoned=tuple(poisoned),
        added_edges=tuple(edges),
        nodes_added=0,
        edges_added=len(edges),
        seed=0,
        trigger_node=v_t,
        clean_counts=tuple(nt.count for nt in graph.schema.node_types),
    )
    return out, plan


# ---------------------------------------------------------------------------
# Activation


def activate_self_node(graph: HeteroGraph, v_attacker: NodeRef, plan: PoisonPlan) -> HeteroGraph:
    """Single completion edge from the attacker node toward the trigger node."""
    if plan.trigger_node is None:
        raise ActivationError("plan has no trigger node (subgraph variant)")
    if v_attacker.type_id != graph.target_type:
        raise ActivationError("attacker node must be of the target type")
    edge = single_edge_completion(graph, v_attacker, plan.trigger_node, plan.metapath)
    if edge is None:
        raise ActivationError(f"no single-edge completion for {v_attacker}")
    return attach_edge(graph, edge)


def _fresh_chain(graph: HeteroGraph, start: NodeRef, end: NodeRef, p: Metapath,
                 intermediate_features: Callable[[HeteroGraph, int], np.ndarray],
                 ) -> tuple[HeteroGraph, int, int]:
    """Wire start -> end along p with brand-new intermediate nodes.

    Returns (graph, nodes_added, edges_added)."""
    out = graph
    nodes_added = 0
    prev = start
    for step in range(p.length):
        if step < p.length - 1:
            t_mid = p.node_types[step + 1]
            out = out.with_added_nodes(t_mid, intermediate_features(out, t_mid))
            nodes_added += 1
            nxt = NodeRef(t_mid, out.num_nodes(t_mid) - 1)
        else:
            nxt = end
        rel = out.schema.relations[p.relations[step]]
        if p.forward[step]:
            spec = EdgeSpec(p.relations[step], prev, nxt, True)
        else:
            spec = EdgeSpec(p.relations[step], nxt, prev, False)
        out = attach_edge(out, spec)
        prev = nxt
    return out, nodes_added, p.length


def _mean_row(graph: HeteroGraph, type_id: int) -> np.ndarray:
    return graph.features[type_id].mean(axis=0)


def activate_indiscriminate(graph: HeteroGraph, v_target: NodeRef,
                            plan: PoisonPlan) -> HeteroGraph:
    """Inject a feature replica of the trigger node and wire it to the victim.

    Reuses an existing intermediate of the victim when a single edge suffices
    (smallest completion), otherwise adds a minimal fresh chain whose
    intermediates carry type-mean features.
    """
    if plan.trigger_node is None:
        raise ActivationError("plan has no trigger node (subgraph variant)")
    if v_target.type_id != graph.target_type:
        raise ActivationError("victim node must be of the target type")
    v_t = plan.trigger_node
    out = graph.with_added_nodes(graph.target_type, graph.features[graph.target_type][v_t.index])
    replica = NodeRef(graph.target_type, out.num_nodes(graph.target_type) - 1)
    edge = single_edge_completion(out, v_target, replica, plan.metapath)
    if edge is not None:
        return attach_edge(out, edge)
    out, _, _ = _fresh_chain(out, v_target, replica, plan.metapath, _mean_row)
    return out


# ---------------------------------------------------------------------------
# Fixed-subgraph baselines


def _sba_feature_sampler(variant: str, clean_counts: Sequence[int], seed_material):
    rng = np.random.default_rng(np.random.SeedSequence(seed_material))

    def sample(graph: HeteroGraph, type_id: int) -> np.ndarray:
        clean = graph.features[type_id][: clean_counts[type_id]]
        if variant == "sba-sample":
            return clean[int(rng.integers(clean.shape[0]))]
        mu = clean.mean(axis=0)
        sd = clean.std(axis=0)
        return mu + sd * rng.standard_normal(clean.shape[1])

    return sample, rng


def _attach_subgraph_trigger(graph: HeteroGraph, node: NodeRef, p_b: Metapath,
                             variant: str, clean_counts: Sequence[int],
                             seed_material, trigger_size: int, er_prob: float,
                             ) -> tuple[HeteroGraph, int, int]:
    """Inject one ER trigger and hook it to ``node``; returns graph and ledger delta."""
    sample, rng = _sba_feature_sampler(variant, clean_counts, seed_material)
    t = graph.target_type
    out = graph
    nodes_added = 0
    edges_added = 0

    refs: list[NodeRef] = []
    for _ in range(trigger_size):
        out = out.with_added_nodes(t, sample(out, t))
        nodes_added += 1
        refs.append(NodeRef(t, out.num_nodes(t) - 1))

    for i in range(trigger_size):
        for j in range(i + 1, trigger_size):
            if rng.random() < er_prob:
                out, n_add, e_add = _fresh_chain(out, refs[i], refs[j], p_b, sample)
                nodes_added += n_add
                edges_added += e_add

    edge = single_edge_completion(out, node, refs[0], p_b)
    if edge is not None:
        out = attach_edge(out, edge)
        edges_added += 1
    else:
        out, n_add, e_add = _fresh_chain(out, node, refs[0], p_b, sample)
        nodes_added += n_add
        edges_added += e_add
    return out, nodes_added, edges_added


def sba_poison(graph: HeteroGraph, variant: str, p_b: Metapath, budget: BudgetConfig,
               split: DataSplit, seed: int, y_t: int, trigger_size: int = 3,
               er_prob: float = 0.8) -> tuple[HeteroGraph, PoisonPlan]:
    """Poison with fixed ER subgraph triggers until the unit budget is spent."""
    if variant not in SBA_VARIANTS:
        raise ValueError(f"variant must be one of {SBA_VARIANTS}, got {variant!r}")
    units = budget_units(graph, split, budget)
    clean_counts = tuple(nt.count for nt in graph.schema.node_types)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5BA]))
    order = rng.permutation(split.train)

    out = graph
    poisoned: list[NodeRef] = []
    nodes_added = 0
    edges_added = 0
    exhausted = False
    for idx in order:
        idx = int(idx)
        if graph.labels[idx] == y_t:
            continue
        node = NodeRef(graph.target_type, idx)
        nxt, n_add, e_add = _attach_subgraph_trigger(
            out, node, p_b, variant, clean_counts, [seed, 0x5BA, idx],
            trigger_size, er_prob)
        if nodes_added + edges_added + n_add + e_add > units:
            exhausted = True
            break
        out, nodes_added, edges_added = nxt, nodes_added + n_add, edges_added + e_add
        poisoned.append(node)
    if not poisoned:
        detail = "cannot cover one subgraph trigger" if exhausted else "found no eligible node"
        raise PoisoningError(f"budget of {units} units {detail}")

    out = out.with_labels_set([(n.index, y_t) for n in poisoned])
    plan = PoisonPlan(
        variant=variant,
        metapath=p_b,
        target_class=y_t,
        poisoned=tuple(poisoned),
        added_edges=(),
        nodes_added=nodes_added,
        edges_added=edges_added,
        seed=seed,
        trigger_size=trigger_size,
        er_prob=er_prob,
        clean_counts=clean_counts,
    )
    return out, plan


# ---------------------------------------------------------------------------
# Activation appliers for the measurement protocols


@dataclass(frozen=True)
class Activation:
    """A tagged per-node trigger application, used by the measurement protocols."""

    tag: str
    fn: Callable[[HeteroGraph, NodeRef], HeteroGraph]

    def __call__(self, graph: HeteroGraph, node: NodeRef) -> HeteroGraph:
        return self.fn(graph, node)


def self_node_applier(plan: PoisonPlan) -> Activation:
    return Activation("self-node", lambda graph, node: activate_self_node(graph, node, plan))


def indiscriminate_applier(plan: PoisonPlan) -> Activation:
    return Activation("indiscriminate",
                      lambda graph, node: activate_indiscriminate(graph, node, plan))


def baseline_trigger_applier(plan: PoisonPlan) -> Activation:
    """Fresh ER trigger per test node, seeded by (plan seed, node index)."""

    def apply(graph: HeteroGraph, node: NodeRef) -> HeteroGraph:
        out, _, _ = _attach_subgraph_trigger(
            graph, node, plan.metapath, plan.variant, plan.clean_counts,
            [plan.seed, 0xAC7, node.index], plan.trigger_size, plan.er_prob)
        return out

    return Activation("baseline-trigger", apply)
