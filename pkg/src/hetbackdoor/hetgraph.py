"""Heterogeneous graph data model, on-disk format, splits, and a synthetic generator.

A graph is a set of typed node collections (each with a dense feature matrix),
typed edge relations between them, and class labels on one designated target
node type. Graphs are immutable; every mutation helper returns a new value and
shares untouched arrays with the original.

On-disk layout ("HG-TSV"): a directory containing ``manifest.json`` plus
plain-text matrices. Feature files hold one whitespace-separated row per node,
edge files one ``src<TAB>dst`` pair per line (0-based local indices), the label
file one integer per target node (-1 = unobserved), and the optional split
file three lines of space-separated train/val/test indices. All files are
UTF-8 with LF line endings. Node types declared with ``"feature_dim": null``
carry no feature file; they receive deterministic one-hot features of
dimension ``min(count, 512)`` (index hashed by modulus) at load time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

MAX_ONEHOT_DIM = 512


class GraphFormatError(ValueError):
    """A graph directory or in-memory graph violates the format contract."""


class NodeRef(NamedTuple):
    type_id: int
    index: int


@dataclass(frozen=True)
class NodeType:
    name: str
    count: int
    feature_dim: int | None  # None = featureless in the manifest, one-hot in memory


@dataclass(frozen=True)
class Relation:
    name: str
    src_type: int
    dst_type: int


@dataclass(frozen=True)
class Schema:
    node_types: tuple[NodeType, ...]
    relations: tuple[Relation, ...]

    def type_id(self, name: str) -> int:
        for i, nt in enumerate(self.node_types):
            if nt.name == name:
                return i
        raise KeyError(f"unknown node type {name!r}")

    def relation_id(self, name: str) -> int:
        for i, rel in enumerate(self.relations):
            if rel.name == name:
                return i
        raise KeyError(f"unknown relation {name!r}")

    def validate(self) -> None:
        names = [nt.name for nt in self.node_types]
        if len(set(names)) != len(names):
            raise GraphFormatError("duplicate node type names")
        rnames = [r.name for r in self.relations]
        if len(set(rnames)) != len(rnames):
            raise GraphFormatError("duplicate relation names")
        for nt in self.node_types:
            if nt.count <= 0:
                raise GraphFormatError(f"node type {nt.name!r} has count {nt.count}")
            if nt.feature_dim is not None and nt.feature_dim <= 0:
                raise GraphFormatError(f"node type {nt.name!r} has feature_dim {nt.feature_dim}")
        for rel in self.relations:
            for t in (rel.src_type, rel.dst_type):
                if not 0 <= t < len(self.node_types):
                    raise GraphFormatError(f"relation {rel.name!r} references unknown type {t}")
        if len(self.node_types) + len(self.relations) <= 2:
            raise GraphFormatError(
                "not heterogeneous: need #node_types + #relations > 2, got "
                f"{len(self.node_types)} + {len(self.relations)}"
            )


def onehot_dim(count: int) -> int:
    return min(count, MAX_ONEHOT_DIM)


def onehot_features(count: int) -> np.ndarray:
    x = np.zeros((count, onehot_dim(count)))
    x[np.arange(count), np.arange(count) % onehot_dim(count)] = 1.0
    return x


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class HeteroGraph:
    """Immutable typed graph. Use :func:`build_graph` so invariants are checked."""

    schema: Schema
    features: tuple[np.ndarray, ...]  # per node type, (count, dim) float64
    edges: tuple[np.ndarray, ...]     # per relation, (E, 2) int64 in declared direction
    labels: np.ndarray                # (count(target_type),) int64, -1 = unobserved
    target_type: int
    num_classes: int
    # memo for derived adjacency structures; safe because the graph is immutable
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def num_nodes(self, type_id: int) -> int:
        return self.schema.node_types[type_id].count

    def feature_dim(self, type_id: int) -> int:
        return self.features[type_id].shape[1]

    @property
    def target_count(self) -> int:
        return self.num_nodes(self.target_type)

    def total_edges(self) -> int:
        return sum(e.shape[0] for e in self.edges)

    def has_edge(self, rel_id: int, src: int, dst: int) -> bool:
        e = self.edges[rel_id]
        return bool(np.any((e[:, 0] == src) & (e[:, 1] == dst)))

    # -- functional updates ------------------------------------------------

    def with_added_edges(self, rel_id: int, pairs: Sequence[tuple[int, int]]) -> "HeteroGraph":
        new = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        merged = np.concatenate([self.edges[rel_id], new], axis=0)
        edges = tuple(merged if i == rel_id else e for i, e in enumerate(self.edges))
        return build_graph(self.schema, self.features, edges, self.labels,
                           self.target_type, self.num_classes)

    def with_labels_set(self, assignments: Sequence[tuple[int, int]]) -> "HeteroGraph":
        labels = self.labels.copy()
        for idx, y in assignments:
            labels[idx] = y
        return build_graph(self.schema, self.features, self.edges, labels,
                           self.target_type, self.num_classes)

    def with_added_nodes(self, type_id: int, feature_rows: np.ndarray) -> "HeteroGraph":
        """Append nodes of one type; new target-type nodes are unlabeled."""
        rows = np.atleast_2d(np.asarray(feature_rows, dtype=np.float64))
        nt = self.schema.node_types[type_id]
        if rows.shape[1] != self.feature_dim(type_id):
            raise GraphFormatError("new node feature width mismatch")
        node_types = tuple(
            replace(t, count=t.count + rows.shape[0]) if i == type_id else t
            for i, t in enumerate(self.schema.node_types)
        )
        schema = Schema(node_types, self.schema.relations)
        features = tuple(
            np.concatenate([f, rows], axis=0) if i == type_id else f
            for i, f in enumerate(self.features)
        )
        labels = self.labels
        if type_id == self.target_type:
            labels = np.concatenate([labels, np.full(rows.shape[0], -1, dtype=np.int64)])
        return build_graph(schema, features, self.edges, labels,
                           self.target_type, self.num_classes)

    def with_features(self, type_id: int, matrix: np.ndarray) -> "HeteroGraph":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != self.features[type_id].shape:
            raise GraphFormatError("replacement feature matrix shape mismatch")
        features = tuple(matrix if i == type_id else f for i, f in enumerate(self.features))
        return build_graph(self.schema, features, self.edges, self.labels,
                           self.target_type, self.num_classes)


def build_graph(schema: Schema,
                features: Sequence[np.ndarray],
                edges: Sequence[np.ndarray],
                labels: np.ndarray,
                target_type: int,
                num_classes: int) -> HeteroGraph:
    """Validate all invariants and freeze the arrays. Rejects, never repairs."""
    schema.validate()
    if not 0 <= target_type < len(schema.node_types):
        raise GraphFormatError(f"target_type {target_type} out of range")
    if num_classes <= 0:
        raise GraphFormatError("num_classes must be positive")
    if len(features) != len(schema.node_types):
        raise GraphFormatError("one feature matrix per node type required")
    if len(edges) != len(schema.relations):
        raise GraphFormatError("one edge list per relation required")

    feats = []
    for t, (nt, f) in enumerate(zip(schema.node_types, features)):
        f = np.asarray(f, dtype=np.float64)
        expected = nt.feature_dim if nt.feature_dim is not None else onehot_dim(nt.count)
        if f.shape != (nt.count, expected):
            raise GraphFormatError(
                f"feature matrix for type {nt.name!r}: expected {(nt.count, expected)}, got {f.shape}"
            )
        if not np.all(np.isfinite(f)):
            raise GraphFormatError(f"non-finite feature value in type {nt.name!r}")
        feats.append(_frozen(f))

    edge_arrays = []
    for r, (rel, e) in enumerate(zip(schema.relations, edges)):
        e = np.asarray(e, dtype=np.int64).reshape(-1, 2)
        n_src = schema.node_types[rel.src_type].count
        n_dst = schema.node_types[rel.dst_type].count
        if e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= n_src
                       or e[:, 1].min() < 0 or e[:, 1].max() >= n_dst):
            raise GraphFormatError(f"edge index out of range in relation {rel.name!r}")
        if e.shape[0] != len(np.unique(e, axis=0)):
            raise GraphFormatError(f"duplicate edge in relation {rel.name!r}")
        edge_arrays.append(_frozen(e))

    labels = np.asarray(labels, dtype=np.int64)
    n_target = schema.node_types[target_type].count
    if labels.shape != (n_target,):
        raise GraphFormatError(f"label vector must have length {n_target}, got {labels.shape}")
    observed = labels[labels >= 0]
    if observed.size and observed.max() >= num_classes:
        raise GraphFormatError("label out of range")
    if np.any(labels < -1):
        raise GraphFormatError("label out of range")

    return HeteroGraph(schema, tuple(feats), tuple(edge_arrays), _frozen(labels),
                       target_type, num_classes)


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class DataSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_split(graph: HeteroGraph, ratios: tuple[float, float, float], seed: int) -> DataSplit:
    """Uniform random split of target-type nodes, no class stratification.

    Train and val sizes are the half-up roundings of ratio * n; test takes
    the remainder (3025 nodes at (0.2, 0.1, 0.7) -> 605/303/2117).
    """
    r_train, r_val, r_test = ratios
    if min(ratios) < 0 or abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be nonnegative and sum to 1, got {ratios}")
    if np.any(graph.labels < 0):
        raise ValueError("all target-type nodes must be labeled before splitting")
    n = graph.target_count
    n_train = _round_half_up(r_train * n)
    n_val = _round_half_up(r_val * n)
    if n_train + n_val > n:
        raise ValueError("split ratios round to more nodes than exist")
    perm = np.random.default_rng(seed).permutation(n)
    return DataSplit(np.sort(perm[:n_train]),
                     np.sort(perm[n_train:n_train + n_val]),
                     np.sort(perm[n_train + n_val:]),
                     seed)


def target_class(graph: HeteroGraph, split: DataSplit) -> int:
    """Class with the fewest training instances; ties go to the smallest id."""
    if split.train.size == 0:
        raise ValueError("empty training set")
    counts = np.bincount(graph.labels[split.train], minlength=graph.num_classes)
    return int(np.argmin(counts[:graph.num_classes]))


# ---------------------------------------------------------------------------
# Synthetic generator

TARGET, AUX1, AUX2 = "T", "A", "B"


@dataclass(frozen=True)
class SynthConfig:
    """Planted two-metapath graph: one target type T, aux types A and B.

    Relations T-A and T-B give the symmetric metapaths T-A-T and T-B-T.
    ``homophily`` is the probability that two T-A-T neighbors share a class
    (1/num_classes = chance); ``homophily_alt`` covers T-B-T and defaults to
    chance. Every target node is wired to at least one aux node of each kind.
    """

    n_target: int = 1000
    n_aux1: int = 300
    n_aux2: int = 300
    num_classes: int = 3
    feature_dim: int = 16
    separation: float = 3.0
    homophily: float = 0.95
    homophily_alt: float | None = None
    targets_per_aux: int = 5
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_target, self.n_aux1, self.n_aux2) < self.num_classes:
            raise ValueError("node counts must be >= num_classes")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be >= num_classes")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        for p in (self.homophily, self.homophily_alt):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError("homophily must be in [0, 1]")
        if self.targets_per_aux < 2:
            raise ValueError("targets_per_aux must be >= 2")


def _wire_aux(rng: np.random.Generator, labels: np.ndarray, n_aux: int,
              per_aux: int, share_prob: float, num_classes: int) -> np.ndarray:
    """Attach each aux node to `per_aux` targets; pure aux nodes draw from one class.

    share_prob is the desired P(two co-attached targets share a class); the
    fraction of pure aux nodes is solved from share = h + (1-h)/C and clamped.
    """
    chance = 1.0 / num_classes
    h = (share_prob - chance) / (1.0 - chance)
    h = min(max(h, 0.0), 1.0)
    members = [np.flatnonzero(labels == c) for c in range(num_classes)]
    n_target = labels.shape[0]
    aux_class = np.full(n_aux, -1, dtype=np.int64)
    pairs: list[tuple[int, int]] = []
    for a in range(n_aux):
        if rng.random() < h:
            c = int(rng.integers(num_classes))
            aux_class[a] = c
            pool = members[c]
        else:
            pool = np.arange(n_target)
        chosen = rng.choice(pool, size=min(per_aux, pool.size), replace=False)
        pairs.extend((int(t), a) for t in chosen)

    # every target needs a neighbor or downstream trigger wiring has no bridge
    covered = np.zeros(n_target, dtype=bool)
    for t, _ in pairs:
        covered[t] = True
    for t in np.flatnonzero(~covered):
        same = np.flatnonzero((aux_class == labels[t]) | (aux_class == -1))
        a = int(rng.choice(same if same.size else np.arange(n_aux)))
        pairs.append((int(t), a))
    return np.asarray(pairs, dtype=np.int64)


def synth_generate(cfg: SynthConfig) -> HeteroGraph:
    """Deterministic class-separable graph with one informative metapath."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c = cfg.num_classes

    labels = rng.integers(0, c, size=cfg.n_target).astype(np.int64)
    for cls in range(c):  # guarantee every class occurs
        if not np.any(labels == cls):
            labels[cls] = cls

    means = np.zeros((c, cfg.feature_dim))
    means[np.arange(c), np.arange(c)] = cfg.separation
    x_t = means[labels] + rng.standard_normal((cfg.n_target, cfg.feature_dim))
    x_a = rng.standard_normal((cfg.n_aux1, cfg.feature_dim))
    x_b = rng.standard_normal((cfg.n_aux2, cfg.feature_dim))

    alt = cfg.homophily_alt if cfg.homophily_alt is not None else 1.0 / c
    edges_ta = _wire_aux(rng, labels, cfg.n_aux1, cfg.targets_per_aux, cfg.homophily, c)
    edges_tb = _wire_aux(rng, labels, cfg.n_aux2, cfg.targets_per_aux, alt, c)

    schema = Schema(
        node_types=(NodeType(TARGET, cfg.n_target, cfg.feature_dim),
                    NodeType(AUX1, cfg.n_aux1, cfg.feature_dim),
                    NodeType(AUX2, cfg.n_aux2, cfg.feature_dim)),
        relations=(Relation("TA", 0, 1), Relation("TB", 0, 2)),
    )
    return build_graph(schema, (x_t, x_a, x_b), (edges_ta, edges_tb), labels,
                       target_type=0, num_classes=c)


# ---------------------------------------------------------------------------
# On-disk format

MANIFEST = "manifest.json"


def _feature_file(name: str) -> str:
    return f"features_{name}.txt"


def _write_matrix(path: Path, m: np.ndarray) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for row in m:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def _read_matrix(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise GraphFormatError(f"missing file {path.name}")
    out = np.empty((rows, cols))
    seen = 0
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if i >= rows:
                raise GraphFormatError(f"{path.name}: expected {rows} rows, found more")
            vals = line.split()
            if len(vals) != cols:
                raise GraphFormatError(f"{path.name}:{i + 1}: expected {cols} values, got {len(vals)}")
            out[i] = [float(v) for v in vals]
            seen += 1
    if seen != rows:
        raise GraphFormatError(f"{path.name}: expected {rows} rows, got {seen}")
    return out


def save_graph(graph: HeteroGraph, root: str | Path, split: DataSplit | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "node_types": [
            {"name": nt.name, "count": nt.count, "feature_dim": nt.feature_dim}
            for nt in graph.schema.node_types
        ],
        "relations": [
            {"name": rel.name,
             "src_type": graph.schema.node_types[rel.src_type].name,
             "dst_type": graph.schema.node_types[rel.dst_type].name,
             "edge_file": f"edges_{rel.name}.tsv"}
            for rel in graph.schema.relations
        ],
        "target_type": graph.schema.node_types[graph.target_type].name,
        "num_classes": graph.num_classes,
        "label_file": "labels.txt",
    }
    if split is not None:
        manifest["split_file"] = "split.txt"
    with (root / MANIFEST).open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    for t, nt in enumerate(graph.schema.node_types):
        if nt.feature_dim is not None:
            _write_matrix(root / _feature_file(nt.name), graph.features[t])
    for r, rel in enumerate(graph.schema.relations):
        with (root / f"edges_{rel.name}.tsv").open("w", encoding="utf-8", newline="\n") as fh:
            for s, d in graph.edges[r]:
                fh.write(f"{s}\t{d}\n")
    with (root / "labels.txt").open("w", encoding="utf-8", newline="\n") as fh:
        for y in graph.labels:
            fh.write(f"{y}\n")
    if split is not None:
        with (root / "split.txt").open("w", encoding="utf-8", newline="\n") as fh:
            for part in (split.train, split.val, split.test):
                fh.write(" ".join(str(i) for i in part))
                fh.write("\n")


def load_graph(root: str | Path) -> HeteroGraph:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise GraphFormatError(f"missing file {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{MANIFEST}: invalid JSON ({exc})") from exc

    try:
        node_types = tuple(
            NodeType(d["name"], int(d["count"]),
                     None if d["feature_dim"] is None else int(d["feature_dim"]))
            for d in manifest["node_types"]
        )
        names = [nt.name for nt in node_types]
        relations = tuple(
            Relation(d["name"], names.index(d["src_type"]), names.index(d["dst_type"]))
            for d in manifest["relations"]
        )
        target = names.index(manifest["target_type"])
        num_classes = int(manifest["num_classes"])
        label_file = manifest["label_file"]
        edge_files = [d["edge_file"] for d in manifest["relations"]]
    except (KeyError, ValueError) as exc:
        raise GraphFormatError(f"{MANIFEST}: {exc}") from exc

    schema = Schema(node_types, relations)
    schema.validate()

    features = []
    for nt in node_types:
        if nt.feature_dim is None:
            features.append(onehot_features(nt.count))
        else:
            features.append(_read_matrix(root / _feature_file(nt.name), nt.count, nt.feature_dim))

    edges = []
    for rel, fname in zip(relations, edge_files):
        path = root / fname
        if not path.is_file():
            raise GraphFormatError(f"missing file {fname}")
        pairs = []
        with path.open("r", encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise GraphFormatError(f"{fname}:{i + 1}: expected two tab-separated indices")
                try:
                    pairs.append((int(parts[0]), int(parts[1])))
                except ValueError as exc:
                    raise GraphFormatError(f"{fname}:{i + 1}: {exc}") from exc
        edges.append(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))

    lpath = root / label_file
    if not lpath.is_file():
        raise GraphFormatError(f"missing file {label_file}")
    labels = []
    with lpath.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            try:
                labels.append(int(line.strip()))
            except ValueError as exc:
                raise GraphFormatError(f"{label_file}:{i + 1}: {exc}") from exc

    return build_graph(schema, features, edges, np.asarray(labels, dtype=np.int64),
                       target, num_classes)


def load_split(root: str | Path) -> DataSplit | None:
    """Read the split named by the manifest, if any."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    fname = manifest.get("split_file")
    if fname is None:
        return None
    lines = (root / fname).read_text(encoding="utf-8").splitlines()
    if len(lines) != 3:
        raise GraphFormatError(f"{fname}: expected three lines (train/val/test)")
    parts = [np.asarray([int(v) for v in line.split()], dtype=np.int64) for line in lines]
    return DataSplit(parts[0], parts[1], parts[2], seed=-1)
