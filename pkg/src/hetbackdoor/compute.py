"""Dense/sparse kernels and a reverse-mode gradient tape.

Dense matrices are plain float64 ``numpy.ndarray`` values; :class:`SparseMatrix`
is an immutable CSR wrapper (scipy storage underneath). All differentiable
operations are module-level functions that work on raw arrays, and record to
the active :class:`Tape` whenever an argument is a tape :class:`Node`. The
backward pass walks the recorded list once, in reverse creation order, which
is a valid reverse topological order by construction.

Everything is 64-bit and deterministic: no threads, no global RNG.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

DenseMatrix = np.ndarray  # row-major float64, by convention


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Sparse storage


class SparseMatrix:
    """Immutable CSR matrix. Column indices are sorted within each row."""

    __slots__ = ("csr",)

    def __init__(self, csr: sp.csr_matrix):
        csr = csr.tocsr().astype(np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        csr.eliminate_zeros()
        csr.data.flags.writeable = False
        csr.indices.flags.writeable = False
        csr.indptr.flags.writeable = False
        self.csr = csr

    @classmethod
    def from_pairs(cls, pairs: np.ndarray, shape: tuple[int, int],
                   values: np.ndarray | None = None) -> "SparseMatrix":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        data = np.ones(pairs.shape[0]) if values is None else np.asarray(values, dtype=np.float64)
        return cls(sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=shape))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(sp.identity(n, format="csr"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def to_dense(self) -> np.ndarray:
        return np.asarray(self.csr.todense(), dtype=np.float64)

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.csr.T.tocsr())

    def binarized(self) -> "SparseMatrix":
        out = self.csr.copy()
        out.data = np.ones_like(out.data)
        return SparseMatrix(out)

    def without_diagonal(self) -> "SparseMatrix":
        out = self.csr.tolil()
        out.setdiag(0.0)
        return SparseMatrix(out.tocsr())

    def maximum(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix(self.csr.maximum(other.csr).tocsr())

    def matmul_sparse(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix((self.csr @ other.csr).tocsr())

    def row(self, i: int) -> np.ndarray:
        return self.csr.indices[self.csr.indptr[i]:self.csr.indptr[i + 1]]

    def pairs(self) -> np.ndarray:
        coo = self.csr.tocoo()
        return np.stack([coo.row, coo.col], axis=1).astype(np.int64)


def row_normalize(adj: SparseMatrix) -> SparseMatrix:
    """D^{-1} A (mean aggregation); zero-degree rows stay zero."""
    deg = np.asarray(adj.csr.sum(axis=1)).ravel()
    inv = np.zeros(adj.shape[0])
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    return SparseMatrix((sp.diags(inv) @ adj.csr).tocsr())


def sym_normalize(adj: SparseMatrix, add_self_loops: bool = True) -> SparseMatrix:
    """D^{-1/2} (A [+ I]) D^{-1/2} with zero-degree rows left as zeros."""
    n, m = adj.shape
    if n != m:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    a = adj.csr
    if add_self_loops:
        a = a + sp.identity(n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return SparseMatrix((d @ a @ d).tocsr())


# ---------------------------------------------------------------------------
# Tape

_ACTIVE: "Tape | None" = None


class Node:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records operations; ``backward`` accumulates gradients for every node."""

    def __init__(self):
        self._records: list[tuple[Node, tuple[Node, ...], tuple[Callable, ...]]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def leaf(self, value: np.ndarray) -> Node:
        return self._record(np.asarray(value, dtype=np.float64), (), ())

    def _record(self, value, parents, vjps) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self, len(self._records))
        self._records.append((node, parents, vjps))
        return node

    def backward(self, output: Node) -> None:
        if output.value.shape not in ((), (1,), (1, 1)):
            raise ShapeError("backward expects a scalar output")
        self._grads = {output.index: np.ones_like(output.value)}
        for node, parents, vjps in reversed(self._records):
            g = self._grads.get(node.index)
            if g is None:
                continue
            for parent, vjp in zip(parents, vjps):
                contrib = vjp(g)
                acc = self._grads.get(parent.index)
                self._grads[parent.index] = contrib if acc is None else acc + contrib

    def grad(self, node: Node) -> np.ndarray:
        return self._grads.get(node.index, np.zeros_like(node.value))


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _emit(value, args, vjps):
    """Record the op if any argument is a live tape node; else return the array."""
    parents = [(a, v) for a, v in zip(args, vjps) if isinstance(a, Node)]
    if _ACTIVE is not None and parents:
        nodes, fns = zip(*parents)
        return _ACTIVE._record(value, nodes, fns)
    return value


# ---------------------------------------------------------------------------
# Operations


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul {av.shape} x {bv.shape}")
    return _emit(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def spmm(a: SparseMatrix, b):
    """Sparse @ dense. The sparse operand is a constant (adjacency)."""
    bv = _val(b)
    if a.shape[1] != bv.shape[0]:
        raise ShapeError(f"spmm {a.shape} x {bv.shape}")
    return _emit(a.csr @ bv, (b,), (lambda g: a.csr.T @ g,))


def add(a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add {av.shape} vs {bv.shape}")
    return _emit(av + bv, (a, b), (lambda g: g, lambda g: g))


def add_bias(m, bias):
    mv, bv = _val(m), _val(bias)
    if bv.shape != (mv.shape[1],):
        raise ShapeError(f"bias {bv.shape} for matrix {mv.shape}")
    return _emit(mv + bv[None, :], (m, bias), (lambda g: g, lambda g: g.sum(axis=0)))


def scale(m, s):
    """Multiply a matrix by a scalar (the scalar may itself be a node)."""
    mv, sv = _val(m), _val(s)
    if sv.shape != ():
        raise ShapeError("scale expects a scalar multiplier")
    return _emit(mv * sv, (m, s),
                 (lambda g: g * sv, lambda g: np.asarray((g * mv).sum())))


def relu(x):
    xv = _val(x)
    mask = xv > 0
    return _emit(np.where(mask, xv, 0.0), (x,), (lambda g: g * mask,))


def elu(x):
    xv = _val(x)
    out = np.where(xv > 0, xv, np.expm1(xv))
    return _emit(out, (x,), (lambda g: g * np.where(xv > 0, 1.0, out + 1.0),))


def tanh(x):
    out = np.tanh(_val(x))
    return _emit(out, (x,), (lambda g: g * (1.0 - out * out),))


def softmax_rows(x):
    """Row-wise softmax (last axis), max-stabilized; rows sum to 1."""
    xv = _val(x)
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _emit(out, (x,),
                 (lambda g: out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def concat_cols(*ms):
    vals = [_val(m) for m in ms]
    if len({v.shape[0] for v in vals}) != 1:
        raise ShapeError("concat_cols row mismatch")
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])
    vjps = tuple(
        (lambda lo, hi: lambda g: g[:, lo:hi])(offsets[i], offsets[i + 1])
        for i in range(len(vals))
    )
    return _emit(np.concatenate(vals, axis=1), ms, vjps)


def mean_all(x):
    xv = _val(x)
    return _emit(np.asarray(xv.mean()), (x,),
                 (lambda g: np.full_like(xv, float(g) / xv.size),))


def stack_scalars(xs: Sequence):
    vals = [_val(x) for x in xs]
    vjps = tuple((lambda i: lambda g: np.asarray(g[i]))(i) for i in range(len(vals)))
    return _emit(np.asarray([float(v) for v in vals]), tuple(xs), vjps)


def pick(v, i: int):
    vv = _val(v)

    def vjp(g):
        out = np.zeros_like(vv)
        out[i] = g
        return out

    return _emit(np.asarray(vv[i]), (v,), (vjp,))


def dropout(x, rate: float, rng: np.random.Generator):
    """Inverted dropout with a caller-supplied mask stream; identity at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    xv = _val(x)
    keep = rng.random(xv.shape) >= rate
    scale_ = 1.0 / (1.0 - rate)
    return _emit(xv * keep * scale_, (x,), (lambda g: g * keep * scale_,))


def masked_cross_entropy(logits, labels: np.ndarray, mask: np.ndarray):
    """Mean negative log-likelihood over the masked rows, max-stabilized."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("empty mask")
    lv = _val(logits)
    y = np.asarray(labels, dtype=np.int64)[mask]
    if y.min() < 0 or y.max() >= lv.shape[1]:
        raise ValueError("label out of range on mask")
    rows = lv[mask]
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(mask)), y]))

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(mask)), y] -= 1.0
        full = np.zeros_like(lv)
        full[mask] = p / len(mask)
        return full * float(g)

    return _emit(np.asarray(loss), (logits,), (vjp,))


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f: Callable, params: Sequence[np.ndarray], eps: float = 1e-5,
               rng: np.random.Generator | None = None,
               max_coords_per_param: int = 10) -> float:
    """Worst relative error of tape gradients vs. central finite differences.

    ``f`` takes one array-like per parameter and returns a scalar; it is run
    once under a tape and twice per sampled coordinate without one.
    """
    rng = rng or np.random.default_rng(0)
    params = [np.asarray(p, dtype=np.float64) for p in params]

    with Tape() as tape:
        nodes = [tape.leaf(p) for p in params]
        out = f(*nodes)
        if not np.all(np.isfinite(_val(out))):
            raise ValueError("function value is not finite")
        tape.backward(out)
        analytic = [tape.grad(n) for n in nodes]

    worst = 0.0
    for k, p in enumerate(params):
        flat_idx = np.arange(p.size)
        if p.size > max_coords_per_param:
            flat_idx = rng.choice(p.size, size=max_coords_per_param, replace=False)
        for idx in flat_idx:
            shift = np.zeros(p.size)
            shift[idx] = eps
            shift = shift.reshape(p.shape)
            args_hi = [q + shift if j == k else q for j, q in enumerate(params)]
            args_lo = [q - shift if j == k else q for j, q in enumerate(params)]
            fd = (float(_val(f(*args_hi))) - float(_val(f(*args_lo)))) / (2 * eps)
            an = float(analytic[k].reshape(-1)[idx])
            err = abs(fd - an) / max(abs(fd), abs(an), 1.0)
            worst = max(worst, err)
    return worst
