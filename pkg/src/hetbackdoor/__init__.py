"""Relation-based backdoor attacks on heterogeneous graph node classifiers.

Poison a heterogeneous graph through single-edge metapath triggers, train
small node classifiers on clean and poisoned graphs, and measure attack
success, stealth, robustness, and defenses with an interference-free ASR
protocol.
"""

from .attack import (Activation, BudgetConfig, PoisonPlan, activate_indiscriminate,
                     activate_self_node, baseline_trigger_applier, budget_units,
                     identify_poisoned_nodes, indiscriminate_applier, poison,
                     sba_poison, select_backdoor_metapath, self_node_applier)
from .centrality import (CentralityScores, betweenness, closeness, compute_scores,
                         degree, eigenvector, pagerank, score_trigger_candidates,
                         select_trigger_node)
from .compute import (DenseMatrix, SparseMatrix, Tape, grad_check, masked_cross_entropy,
                      row_normalize, sym_normalize)
from .defense import DefenseReport, candidate_defense_metapaths, prune, prune_ld
from .evaluation import (AsrResult, NoiseConfig, asr_one_at_a_time, asr_simultaneous,
                         eligible_nodes, noisy_applier, perturb_features, sweep_budget,
                         sweep_density, sweep_noise)
from .hetgraph import (DataSplit, GraphFormatError, HeteroGraph, NodeRef, NodeType,
                       Relation, Schema, SynthConfig, build_graph, load_graph,
                       load_split, make_split, save_graph, synth_generate, target_class)
from .metapath import (AlreadyConnectedError, EdgeSpec, Metapath, attach_edge,
                       compose_adjacency, extract_subgraph, is_connected_via,
                       parse_metapath, single_edge_completion)
from .models import (ModelConfig, TrainConfig, TrainedModel, TrainingDivergence,
                     evaluate, f1_scores, forward, get_metapath_attention, load_model,
                     predict, save_model, train)

__all__ = [name for name in dir() if not name.startswith("_")]
