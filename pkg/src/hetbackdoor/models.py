"""Three node classifiers over heterogeneous graphs, plus a deterministic trainer.

* ``gcn``  - two symmetric-normalized propagation layers on one metapath
  projection, ReLU between, linear head.
* ``rgcn`` - two layers of per-relation mean aggregation with
  relation-and-direction-specific weights plus a per-type self weight.
* ``han``  - one propagation layer per candidate metapath, a learned semantic
  attention (query over tanh-projected mean embeddings, softmax across
  metapaths) combining the per-metapath embeddings, linear head. Node-level
  attention is folded into the propagation; only the metapath-level weights
  are observable.

Training is full-batch Adam with early stopping on validation loss. Given a
seed, initialization, dropout masks, and therefore the final parameters are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import compute as C
from .compute import SparseMatrix, Tape
from .hetgraph import DataSplit, HeteroGraph, Schema, _read_matrix, _write_matrix
from .metapath import Metapath, compose_adjacency, parse_metapath, relation_adjacency

ARCHITECTURES = ("gcn", "rgcn", "han")
_DEFAULT_DROPOUT = {"gcn": 0.0, "rgcn": 0.0, "han": 0.6}


class TrainingDivergence(RuntimeError):
    """Non-finite loss during optimization."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    metapaths: tuple[Metapath, ...] = ()
    hidden: int = 128
    dropout: float | None = None  # None = architecture default
    heads: int = 8                # kept for config compatibility; folded in han-lite
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.hidden <= 0:
            raise ValueError("hidden dim must be positive")
        rate = self.drop_rate
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.arch == "gcn" and len(self.metapaths) != 1:
            raise ValueError("gcn takes exactly one metapath")
        if self.arch == "han" and not self.metapaths:
            raise ValueError("han needs at least one candidate metapath")

    @property
    def drop_rate(self) -> float:
        return _DEFAULT_DROPOUT[self.arch] if self.dropout is None else self.dropout


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    weight_decay: float = 1e-4
    max_epochs: int = 200
    patience: int = 30
    min_delta: float = 1e-3

    def __post_init__(self):
        if min(self.learning_rate, self.max_epochs) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate/epochs must be positive, weight decay >= 0")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")


@dataclass(frozen=True)
class TrainedModel:
    config: ModelConfig
    params: Mapping[str, np.ndarray]
    seed: int
    best_epoch: int
    best_val_loss: float
    attention: dict[str, float] | None = None  # han only
    history: tuple[tuple[float, float], ...] = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Parameter initialization


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _rgcn_messages(graph: HeteroGraph) -> list[tuple[str, int, int]]:
    """(key, dst_type, src_type) for every relation direction."""
    out = []
    for rid, rel in enumerate(graph.schema.relations):
        out.append((f"r{rid}_fwd", rel.dst_type, rel.src_type))
        if rel.src_type != rel.dst_type:
            out.append((f"r{rid}_rev", rel.src_type, rel.dst_type))
    return out


def init_params(cfg: ModelConfig, graph: HeteroGraph) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1717]))
    h, c = cfg.hidden, graph.num_classes
    p: dict[str, np.ndarray] = {}
    if cfg.arch == "gcn":
        d = graph.feature_dim(graph.target_type)
        p["w1"] = _uniform(rng, d, (d, h))
        p["b1"] = np.zeros(h)
        p["w2"] = _uniform(rng, h, (h, h))
        p["b2"] = np.zeros(h)
        p["w_out"] = _uniform(rng, h, (h, c))
        p["b_out"] = np.zeros(c)
    elif cfg.arch == "rgcn":
        dims = [graph.feature_dim(t) for t in range(len(graph.schema.node_types))]
        for layer, in_dims in ((0, dims), (1, [h] * len(dims))):
            for t, d in enumerate(in_dims):
                p[f"l{layer}_self_t{t}"] = _uniform(rng, d, (d, h))
                p[f"l{layer}_bias_t{t}"] = np.zeros(h)
            for key, _dst, src in _rgcn_messages(graph):
                p[f"l{layer}_{key}"] = _uniform(rng, in_dims[src], (in_dims[src], h))
        p["w_out"] = _uniform(rng, h, (h, c))
        p["b_out"] = np.zeros(c)
    else:  # han
        d = graph.feature_dim(graph.target_type)
        for i in range(len(cfg.metapaths)):
            p[f"w_mp{i}"] = _uniform(rng, d, (d, h))
            p[f"b_mp{i}"] = np.zeros(h)
        p["w_sem"] = _uniform(rng, h, (h, h))
        p["b_sem"] = np.zeros(h)
        p["q_sem"] = _uniform(rng, h, (h, 1))
        p["w_out"] = _uniform(rng, h, (h, c))
        p["b_out"] = np.zeros(c)
    return p


# ---------------------------------------------------------------------------
# Forward passes


@dataclass(frozen=True)
class _Prepared:
    """Graph-derived constants reused across epochs of one training run."""

    projections: tuple[SparseMatrix, ...] = ()
    messages: tuple[tuple[str, int, int, SparseMatrix], ...] = ()


def prepare(cfg: ModelConfig, graph: HeteroGraph) -> _Prepared:
    if cfg.arch in ("gcn", "han"):
        projs = tuple(
            C.sym_normalize(compose_adjacency(graph, p), add_self_loops=True)
            for p in cfg.metapaths
        )
        return _Prepared(projections=projs)
    msgs = []
    for key, dst, src in _rgcn_messages(graph):
        rid = int(key[1:].split("_")[0])
        adj = relation_adjacency(graph, rid, forward=key.endswith("_fwd"))
        msgs.append((key, dst, src, C.row_normalize(adj.transpose())))
    return _Prepared(messages=tuple(msgs))


def _maybe_dropout(x, rate: float, rng: np.random.Generator | None):
    return C.dropout(x, rate, rng) if (rng is not None and rate > 0.0) else x


def _forward_gcn(cfg, params, graph, prep, rng):
    a = prep.projections[0]
    x = _maybe_dropout(graph.features[graph.target_type], cfg.drop_rate, rng)
    h = C.relu(C.add_bias(C.spmm(a, C.matmul(x, params["w1"])), params["b1"]))
    h = _maybe_dropout(h, cfg.drop_rate, rng)
    h = C.add_bias(C.spmm(a, C.matmul(h, params["w2"])), params["b2"])
    return C.add_bias(C.matmul(h, params["w_out"]), params["b_out"])


def _forward_rgcn(cfg, params, graph, prep, rng):
    hs = [
        _maybe_dropout(graph.features[t], cfg.drop_rate, rng)
        for t in range(len(graph.schema.node_types))
    ]
    for layer in (0, 1):
        nxt = []
        for t in range(len(hs)):
            acc = C.add_bias(C.matmul(hs[t], params[f"l{layer}_self_t{t}"]),
                             params[f"l{layer}_bias_t{t}"])
            for key, dst, src, mat in prep.messages:
                if dst == t:
                    acc = C.add(acc, C.spmm(mat, C.matmul(hs[src], params[f"l{layer}_{key}"])))
            nxt.append(C.relu(acc))
        hs = nxt
    return C.add_bias(C.matmul(hs[graph.target_type], params["w_out"]), params["b_out"])


def _forward_han(cfg, params, graph, prep, rng):
    x = graph.features[graph.target_type]
    embeddings = []
    scores = []
    for i, a in enumerate(prep.projections):
        xi = _maybe_dropout(x, cfg.drop_rate, rng)
        z = C.elu(C.add_bias(C.spmm(a, C.matmul(xi, params[f"w_mp{i}"])), params[f"b_mp{i}"]))
        embeddings.append(z)
        proj = C.tanh(C.add_bias(C.matmul(z, params["w_sem"]), params["b_sem"]))
        scores.append(C.mean_all(C.matmul(proj, params["q_sem"])))
    alpha = C.softmax_rows(C.stack_scalars(scores))
    combined = C.scale(embeddings[0], C.pick(alpha, 0))
    for i in range(1, len(embeddings)):
        combined = C.add(combined, C.scale(embeddings[i], C.pick(alpha, i)))
    combined = _maybe_dropout(combined, cfg.drop_rate, rng)
    logits = C.add_bias(C.matmul(combined, params["w_out"]), params["b_out"])
    return logits, alpha


def _forward(cfg, params, graph, prep, rng=None):
    if cfg.arch == "gcn":
        return _forward_gcn(cfg, params, graph, prep, rng)
    if cfg.arch == "rgcn":
        return _forward_rgcn(cfg, params, graph, prep, rng)
    return _forward_han(cfg, params, graph, prep, rng)[0]


def forward(model: TrainedModel, graph: HeteroGraph) -> np.ndarray:
    """Inference logits for every target-type node (dropout disabled)."""
    prep = prepare(model.config, graph)
    return np.asarray(_forward(model.config, dict(model.params), graph, prep))


def predict(model: TrainedModel, graph: HeteroGraph) -> np.ndarray:
    return forward(model, graph).argmax(axis=1)


def metapath_attention_weights(cfg: ModelConfig, params, graph: HeteroGraph,
                               prep: _Prepared | None = None) -> dict[str, float]:
    prep = prep or prepare(cfg, graph)
    _, alpha = _forward_han(cfg, params, graph, prep, rng=None)
    vec = np.asarray(alpha, dtype=np.float64)
    return {p.name: float(vec[i]) for i, p in enumerate(cfg.metapaths)}


def get_metapath_attention(model: TrainedModel) -> dict[str, float]:
    """Softmax-normalized semantic attention per candidate metapath (han only)."""
    if model.config.arch != "han":
        raise ValueError(f"attention weights require arch 'han', got {model.config.arch!r}")
    assert model.attention is not None
    return dict(model.attention)


# ---------------------------------------------------------------------------
# Training


def _adam_step(params, grads, state, lr, weight_decay, t):
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for k in params:
        g = grads[k] + weight_decay * params[k]
        m, v = state[k]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state[k] = (m, v)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, graph: HeteroGraph,
          split: DataSplit) -> TrainedModel:
    """Full-batch Adam with early stopping on validation loss.

    The returned parameters are those of the epoch with the lowest validation
    loss; training stops once `patience` epochs pass without the loss
    improving by at least `min_delta`.
    """
    if split.train.size == 0:
        raise ValueError("empty training split")
    labeled = graph.labels >= 0
    train_idx = split.train[labeled[split.train]]
    val_idx = split.val[labeled[split.val]]
    if train_idx.size == 0:
        raise ValueError("no labeled nodes in the training split")
    monitor_idx = val_idx if val_idx.size else train_idx

    prep = prepare(model_cfg, graph)
    params = init_params(model_cfg, graph)
    state = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}
    drop_rng = np.random.default_rng(np.random.SeedSequence([model_cfg.seed, 0xD0]))

    best_val = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    delta_ref = np.inf
    wait = 0
    history = []

    for epoch in range(1, train_cfg.max_epochs + 1):
        with Tape() as tape:
            nodes = {k: tape.leaf(v) for k, v in params.items()}
            logits = _forward(model_cfg, nodes, graph, prep, rng=drop_rng)
            loss = C.masked_cross_entropy(logits, graph.labels, train_idx)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise TrainingDivergence(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            grads = {k: tape.grad(n) for k, n in nodes.items()}
        _adam_step(params, grads, state, train_cfg.learning_rate,
                   train_cfg.weight_decay, epoch)

        val_logits = _forward(model_cfg, params, graph, prep)
        val_loss = float(C.masked_cross_entropy(val_logits, graph.labels, monitor_idx))
        if not np.isfinite(val_loss):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}")
        history.append((loss_val, val_loss))

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
        if val_loss < delta_ref - train_cfg.min_delta:
            delta_ref = val_loss
            wait = 0
        else:
            wait += 1
        if wait >= train_cfg.patience:
            break

    attention = None
    if model_cfg.arch == "han":
        attention = metapath_attention_weights(model_cfg, best_params, graph, prep)
    for v in best_params.values():
        v.flags.writeable = False
    return TrainedModel(model_cfg, best_params, model_cfg.seed, best_epoch,
                        best_val, attention, tuple(history))


# ---------------------------------------------------------------------------
# Metrics


def f1_scores(truth: np.ndarray, pred: np.ndarray, num_classes: int) -> tuple[float, float]:
    """(micro, macro) F1 for single-label multi-class predictions.

    Micro-F1 equals accuracy here; macro averages per-class F1 over all
    classes, counting classes absent from both truth and prediction as 0.
    """
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    micro = float(np.mean(truth == pred))
    per_class = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        per_class.append(0.0 if denom == 0 else 2 * tp / denom)
    return micro, float(np.mean(per_class))


def evaluate(model: TrainedModel, graph: HeteroGraph, nodes: np.ndarray) -> tuple[float, float]:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("empty evaluation node set")
    truth = graph.labels[nodes]
    if np.any(truth < 0):
        raise ValueError("evaluation nodes must be labeled")
    pred = predict(model, graph)[nodes]
    return f1_scores(truth, pred, graph.num_classes)


# ---------------------------------------------------------------------------
# Checkpoints (manifest header + text matrices)


def save_model(model: TrainedModel, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    header = {
        "arch": cfg.arch,
        "hidden": cfg.hidden,
        "dropout": cfg.dropout,
        "heads": cfg.heads,
        "seed": cfg.seed,
        "metapaths": [p.name for p in cfg.metapaths],
        "best_epoch": model.best_epoch,
        "best_val_loss": model.best_val_loss,
        "attention": model.attention,
        "params": {name: list(value.shape) for name, value in model.params.items()},
    }
    with (root / "model.json").open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    for name, value in model.params.items():
        _write_matrix(root / f"param_{name}.txt", np.atleast_2d(value))


def load_model(root: str | Path, schema: Schema) -> TrainedModel:
    root = Path(root)
    header = json.loads((root / "model.json").read_text(encoding="utf-8"))
    metapaths = tuple(parse_metapath(schema, name) for name in header["metapaths"])
    cfg = ModelConfig(header["arch"], metapaths, header["hidden"],
                      header["dropout"], header["heads"], header["seed"])
    params = {}
    for name, shape in header["params"].items():
        flat = np.atleast_2d(np.zeros(shape))
        mat = _read_matrix(root / f"param_{name}.txt", flat.shape[0], flat.shape[1])
        params[name] = mat.reshape(shape)
    att = header["attention"]
    return TrainedModel(cfg, params, header["seed"], header["best_epoch"],
                        header["best_val_loss"], att)
