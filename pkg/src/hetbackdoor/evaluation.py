"""Measurement machinery: ASR protocols, feature perturbation, and sweeps.

The headline protocol activates the trigger on one eligible test node at a
time, runs inference on that private copy, and discards it, so per-node
outcomes never interfere. The legacy simultaneous protocol (kept for the
trigger-density study) batches activations on a shared copy and averages the
per-batch success rates; with singleton batches the two coincide exactly.

Eligible nodes are test nodes whose true label differs from the target class
and, for relation-trigger plans, that do not already reach the trigger node
along the backdoor metapath.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attack import (Activation, BudgetConfig, PoisonPlan, identify_poisoned_nodes,
                     indiscriminate_applier, poison, self_node_applier)
from .hetgraph import DataSplit, HeteroGraph, NodeRef
from .metapath import Metapath, compose_adjacency, is_connected_via
from .models import ModelConfig, TrainConfig, TrainedModel, evaluate, forward, train


@dataclass(frozen=True)
class AsrResult:
    strategy: str
    numerator: int
    denominator: int
    asr: float
    outcomes: tuple[tuple[int, bool], ...]


@dataclass(frozen=True)
class NoiseConfig:
    level: float
    scope: str = "node+neighbors"  # or "node"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"noise level must be in [0, 1], got {self.level}")
        if self.scope not in ("node", "node+neighbors"):
            raise ValueError(f"unknown noise scope {self.scope!r}")


def eligible_nodes(graph: HeteroGraph, test_nodes: np.ndarray, plan: PoisonPlan) -> np.ndarray:
    """Test nodes that can meaningfully carry a trigger (see module docstring)."""
    test_nodes = np.asarray(test_nodes, dtype=np.int64)
    t = graph.target_type
    keep = []
    for i in test_nodes:
        i = int(i)
        if graph.labels[i] == plan.target_class:
            continue
        if plan.trigger_node is not None:
            if i == plan.trigger_node.index:
                continue  # a node cannot carry its own trigger
            if is_connected_via(graph, NodeRef(t, i), plan.trigger_node, plan.metapath):
                continue
        keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def asr_one_at_a_time(model: TrainedModel, graph: HeteroGraph, test_nodes: np.ndarray,
                      plan: PoisonPlan, applier: Activation) -> AsrResult:
    """Trigger one eligible node per graph copy; the base graph never changes."""
    elig = eligible_nodes(graph, test_nodes, plan)
    if elig.size == 0:
        raise ValueError("no eligible test nodes for ASR measurement")
    t = graph.target_type
    outcomes = []
    hits = 0
    for i in elig:
        activated = applier(graph, NodeRef(t, int(i)))
        pred = int(np.argmax(forward(model, activated)[int(i)]))
        ok = pred == plan.target_class
        hits += ok
        outcomes.append((int(i), bool(ok)))
    return AsrResult(applier.tag, hits, int(elig.size), hits / elig.size, tuple(outcomes))


def asr_simultaneous(model: TrainedModel, graph: HeteroGraph, test_nodes: np.ndarray,
                     plan: PoisonPlan, applier: Activation, fraction: float,
                     seed: int) -> AsrResult:
    """Legacy protocol: activate whole batches on one shared copy.

    Eligible nodes are partitioned (seeded shuffle, no replacement) into
    batches of ceil(fraction * n); the reported ASR is the unweighted mean of
    per-batch success rates, as in the density study this reproduces.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    elig = eligible_nodes(graph, test_nodes, plan)
    if elig.size == 0:
        raise ValueError("no eligible test nodes for ASR measurement")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51E]))
    order = elig[rng.permutation(elig.size)]
    bs = int(np.ceil(fraction * elig.size))
    t = graph.target_type

    outcomes = []
    hits = 0
    batch_rates = []
    for lo in range(0, order.size, bs):
        batch = order[lo:lo + bs]
        activated = graph
        for i in batch:
            activated = applier(activated, NodeRef(t, int(i)))
        preds = np.argmax(forward(model, activated), axis=1)
        ok = preds[batch] == plan.target_class
        hits += int(ok.sum())
        batch_rates.append(float(ok.mean()))
        outcomes.extend((int(i), bool(o)) for i, o in zip(batch, ok))
    outcomes.sort()
    return AsrResult(applier.tag, hits, int(elig.size), float(np.mean(batch_rates)),
                     tuple(outcomes))


# ---------------------------------------------------------------------------
# Feature perturbation (simulated graph dynamics)


def perturb_features(graph: HeteroGraph, nodes, p: Metapath, cfg: NoiseConfig) -> HeteroGraph:
    """Blend affected rows toward resamples of the empirical feature distribution.

    Each affected row becomes (1 - level) * row + level * z with z drawn
    per-dimension from Normal(column mean, column std) of the target-type
    matrix. Structure is untouched; level 0 returns the graph unchanged.
    """
    if cfg.level == 0.0:
        return graph
    t = graph.target_type
    nodes = sorted({int(i) for i in np.atleast_1d(np.asarray(nodes, dtype=np.int64))})
    affected = set(nodes)
    if cfg.scope == "node+neighbors":
        adj = compose_adjacency(graph, p)
        adj = adj.maximum(adj.transpose())
        for i in nodes:
            affected.update(int(j) for j in adj.row(i))

    feats = graph.features[t]
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x40153]))
    new = feats.copy()
    for i in sorted(affected):
        z = mu + sd * rng.standard_normal(feats.shape[1])
        new[i] = (1.0 - cfg.level) * new[i] + cfg.level * z
    return graph.with_features(t, new)


def noisy_applier(applier: Activation, p: Metapath, level: float, seed: int,
                  scope: str = "node+neighbors") -> Activation:
    """Perturb the victim's features (and neighborhood) before activating."""

    def fn(graph: HeteroGraph, node: NodeRef) -> HeteroGraph:
        cfg = NoiseConfig(level, scope, seed=seed * 1_000_003 + node.index)
        return applier(perturb_features(graph, [node.index], p, cfg), node)

    return Activation(applier.tag, fn)


# ---------------------------------------------------------------------------
# Sweeps


def sweep_noise(model: TrainedModel, graph: HeteroGraph, test_nodes: np.ndarray,
                plan: PoisonPlan, levels, seed: int = 0,
                scope: str = "node+neighbors") -> list[dict]:
    """Rows (level, asr_self_node, asr_indiscriminate), one-at-a-time protocol."""
    rows = []
    for level in levels:
        row = {"level": float(level)}
        for applier in (self_node_applier(plan), indiscriminate_applier(plan)):
            noisy = noisy_applier(applier, plan.metapath, float(level), seed, scope)
            res = asr_one_at_a_time(model, graph, test_nodes, plan, noisy)
            row[f"asr_{applier.tag.replace('-', '_')}"] = res.asr
        rows.append(row)
    return rows


def sweep_density(model: TrainedModel, graph: HeteroGraph, test_nodes: np.ndarray,
                  plan: PoisonPlan, applier: Activation, fractions,
                  seed: int = 0) -> list[dict]:
    """Legacy-protocol ASR as a function of the simultaneous-trigger fraction."""
    rows = []
    for f in fractions:
        res = asr_simultaneous(model, graph, test_nodes, plan, applier, float(f), seed)
        rows.append({"fraction": float(f), "strategy": applier.tag, "asr": res.asr,
                     "numerator": res.numerator, "denominator": res.denominator})
    return rows


def sweep_budget(graph: HeteroGraph, split: DataSplit, v_t: NodeRef, p_b: Metapath,
                 y_t: int, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 budgets, seeds) -> tuple[list[dict], list[dict]]:
    """Poison/train/evaluate at each budget; returns (per-seed rows, seed means)."""
    per_seed = []
    for budget in budgets:
        for seed in seeds:
            v_p = identify_poisoned_nodes(graph, v_t, p_b, BudgetConfig(float(budget)),
                                          split, int(seed), y_t)
            poisoned_graph, plan = poison(graph, v_t, p_b, v_p, y_t)
            model = train(replace(model_cfg, seed=int(seed)), train_cfg,
                          poisoned_graph, split)
            micro, macro = evaluate(model, poisoned_graph, split.test)
            row = {"budget": float(budget), "seed": int(seed),
                   "poisoned_nodes": len(v_p),
                   "clean_micro_f1": micro, "clean_macro_f1": macro}
            for applier in (self_node_applier(plan), indiscriminate_applier(plan)):
                res = asr_one_at_a_time(model, poisoned_graph, split.test, plan, applier)
                row[f"asr_{applier.tag.replace('-', '_')}"] = res.asr
            per_seed.append(row)
    means = average_rows(per_seed, key="budget")
    return per_seed, means


def average_rows(rows: list[dict], key: str) -> list[dict]:
    """Arithmetic mean of numeric columns grouped by ``key`` (drops 'seed')."""
    groups: dict[float, list[dict]] = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    out = []
    for k in sorted(groups):
        chunk = groups[k]
        avg = {key: k, "num_seeds": len(chunk)}
        for col in chunk[0]:
            if col in (key, "seed") or not isinstance(chunk[0][col], (int, float)):
                continue
            avg[col] = float(np.mean([r[col] for r in chunk]))
        out.append(avg)
    return out
