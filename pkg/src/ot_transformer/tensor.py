"""Dense float64 matrices with tape-based reverse-mode differentiation.

Every value is a rank-2 ``Tensor``. Operations executed while a :class:`Tape`
is active, and that touch a tensor requiring gradients, append a node to the
tape. :func:`backward` walks the tape in reverse and accumulates gradients
into the leaf tensors (``requires_grad=True``).

Batches are handled by concatenating sequences along the column axis; the
fused :func:`attention` primitive keeps sequences independent.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DegenerateMaskError",
    "TapeError",
    "Tape",
    "Tensor",
    "backward",
    "no_tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "transpose",
    "total",
    "mean",
    "col_sums",
    "row_sums",
    "frobenius_norm_sq",
    "gelu",
    "softmax_cols",
    "layer_norm",
    "attention",
    "causal_mask",
    "cross_entropy",
    "mse",
    "gather_cols",
    "vec_blocks",
    "vec",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateMaskError(ValueError):
    """A softmax column has every entry masked out."""


class TapeError(RuntimeError):
    """Misuse of the tape, e.g. differentiating a tensor recorded elsewhere."""


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. Use as a context manager::

        with Tape() as tape:
            loss = f(params)
        backward(tape, loss)
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[tuple[str, tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [op for op, _, _ in self.nodes]

    def release(self) -> None:
        """Drop recorded nodes. Tensors point back at their tape, so without
        this the graph lingers until the cyclic garbage collector runs."""
        self.nodes.clear()


class no_tape:
    """Temporarily suspend recording (evaluation mode)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are rank-2, got an array of shape {arr.shape}")
    return arr


class Tensor:
    """A rank-2 float64 matrix, optionally a differentiable leaf.

    1-D input becomes a column vector, a scalar becomes 1x1. ``grad`` is
    ``None`` until :func:`backward` writes into it.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        t.tape = None
        t.name = None
        return t

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.tape is tape and t.node is not None)


def _emit(out: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    if _ACTIVE:
        tape = _ACTIVE[-1]
        if any(_tracked(p, tape) for p in parents):
            t.tape = tape
            t.node = len(tape.nodes)
            tape.nodes.append((op, parents, grad_fn))
    return t


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Gradients add onto whatever ``grad`` already holds, so a second call
    without zeroing doubles them. Accumulation follows reverse tape order,
    which keeps results bit-deterministic.
    """
    if root.tape is not tape or root.node is None:
        raise TapeError("root was not produced on this tape")
    if root.shape != (1, 1):
        raise TapeError(f"root must be a scalar (1x1), got {root.shape}")
    grads: list[np.ndarray | None] = [None] * (root.node + 1)
    grads[root.node] = np.ones((1, 1))
    nodes = tape.nodes
    for idx in range(root.node, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        _, parents, grad_fn = nodes[idx]
        for p, pg in zip(parents, grad_fn(g)):
            if pg is None:
                continue
            if p.tape is tape and p.node is not None:
                acc = grads[p.node]
                grads[p.node] = pg if acc is None else acc + pg
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    p.grad += pg


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape} (inner dimensions differ)")
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, "matmul", (a, b), grad_fn)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.shape == (a.rows, 1):
        return "col"
    if b.shape == (1, a.cols):
        return "row"
    if b.shape == (1, 1):
        return "scalar"
    raise ShapeError(f"{op}: cannot combine {a.shape} with {b.shape}")


def _reduce_like(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "col":
        return g.sum(axis=1, keepdims=True)
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    return g.sum().reshape(1, 1)


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b, where b may also be a column (rows x 1), row, or 1x1 broadcast."""
    kind = _broadcast_kind(a, b, "add")

    def grad_fn(g):
        return g, _reduce_like(g, kind)

    return _emit(a.data + b.data, "add", (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "sub")

    def grad_fn(g):
        return g, -_reduce_like(g, kind)

    return _emit(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")
    A, B = a.data, b.data

    def grad_fn(g):
        return g * B, _reduce_like(g * A, kind)

    return _emit(A * B, "mul", (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _emit(a.data * s, "scale", (a,), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, "neg", (a,), lambda g: (-g,))


def transpose(a: Tensor) -> Tensor:
    return _emit(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = a.shape

    def grad_fn(g):
        return (np.full(shape, g[0, 0]),)

    return _emit(a.data.sum().reshape(1, 1), "total", (a,), grad_fn)


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size

    def grad_fn(g):
        return (np.full(shape, g[0, 0] / n),)

    return _emit(a.data.mean().reshape(1, 1), "mean", (a,), grad_fn)


def col_sums(a: Tensor) -> Tensor:
    """1 x cols tensor holding the sum of each column."""
    rows = a.rows

    def grad_fn(g):
        return (np.repeat(g, rows, axis=0),)

    return _emit(a.data.sum(axis=0, keepdims=True), "col_sums", (a,), grad_fn)


def row_sums(a: Tensor) -> Tensor:
    """rows x 1 tensor holding the sum of each row."""
    cols = a.cols

    def grad_fn(g):
        return (np.repeat(g, cols, axis=1),)

    return _emit(a.data.sum(axis=1, keepdims=True), "row_sums", (a,), grad_fn)


def frobenius_norm_sq(a: Tensor) -> Tensor:
    A = a.data

    def grad_fn(g):
        return (2.0 * g[0, 0] * A,)

    return _emit(np.einsum("ij,ij->", A, A).reshape(1, 1), "frobenius_norm_sq", (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (GPT-2 form)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x2 * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        d = 1.0 - th * th
        d *= x
        d *= _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d += 1.0 + th
        d *= 0.5
        d *= g
        return (d,)

    return _emit(out, "gelu", (a,), grad_fn)


# ---------------------------------------------------------------------------
# softmax, normalization, attention
# ---------------------------------------------------------------------------


def _softmax_axis0(z: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Softmax along axis -2; masked entries become exp(-inf) = 0 exactly."""
    if mask is not None:
        z = z + np.where(mask, 0.0, -np.inf)
    e = z - z.max(axis=-2, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-2, keepdims=True)
    return e


def softmax_cols(a: Tensor, mask=None) -> Tensor:
    """Column-wise softmax; entries where ``mask`` is False come out exactly 0.

    Uses max-subtraction, so large logits do not overflow.
    """
    m = None
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        if m.shape != a.shape:
            raise ShapeError(f"softmax_cols: mask {m.shape} vs input {a.shape}")
        if not m.any(axis=0).all():
            bad = int(np.flatnonzero(~m.any(axis=0))[0])
            raise DegenerateMaskError(f"softmax_cols: column {bad} is fully masked")
    s = _softmax_axis0(a.data, m)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return _emit(s, "softmax_cols", (a,), grad_fn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column (token) to zero mean / unit variance, then apply gain and bias."""
    if gain.shape != (a.rows, 1) or bias.shape != (a.rows, 1):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({a.rows}, 1)"
        )
    x = a.data
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G, Bv = gain.data, bias.data

    def grad_fn(g):
        dxhat = g * G
        dx = inv * (
            dxhat
            - dxhat.mean(axis=0, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=1, keepdims=True), g.sum(axis=1, keepdims=True)

    return _emit(xhat * G + Bv, "layer_norm", (a, gain, bias), grad_fn)


def causal_mask(n: int) -> np.ndarray:
    """n x n boolean mask in (key, query) layout: key j' is visible to query j iff j' <= j."""
    return np.triu(np.ones((n, n), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, seq_len: int | None = None,
              causal: bool = False) -> Tensor:
    """Multi-head scaled dot-product attention over column-concatenated sequences.

    ``q``, ``k``, ``v`` are (n_heads*dk) x N with head h occupying rows
    ``h*dk:(h+1)*dk``. Columns are grouped into independent sequences of
    ``seq_len`` tokens (default: one sequence of N tokens). For each head and
    sequence the output column j is ``V softmax(K^T q_j / sqrt(dk))``, where the
    softmax runs over keys and, when ``causal``, only keys j' <= j.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    rows, N = q.shape
    if rows % n_heads:
        raise ShapeError(f"attention: {rows} rows not divisible by {n_heads} heads")
    n = N if seq_len is None else seq_len
    if N % n:
        raise ShapeError(f"attention: {N} columns not divisible by seq_len {n}")
    dk = rows // n_heads
    B = N // n
    c = 1.0 / math.sqrt(dk)

    def split(x: np.ndarray) -> np.ndarray:
        # (H*dk, B*n) -> (B, H, dk, n)
        return x.reshape(n_heads, dk, B, n).transpose(2, 0, 1, 3)

    def merge(x: np.ndarray) -> np.ndarray:
        return x.transpose(1, 2, 0, 3).reshape(rows, N)

    Q, K, V = split(q.data), split(k.data), split(v.data)
    S = np.matmul(K.transpose(0, 1, 3, 2), Q) * c  # (B, H, keys, queries)
    mask = causal_mask(n) if causal else None
    A = _softmax_axis0(S, mask)
    out = merge(np.matmul(V, A))

    def grad_fn(g):
        dO = split(g)
        dV = np.matmul(dO, A.transpose(0, 1, 3, 2))
        dA = np.matmul(V.transpose(0, 1, 3, 2), dO)
        dS = dA * A
        dS -= A * dS.sum(axis=-2, keepdims=True)
        dS *= c
        dK = np.matmul(Q, dS.transpose(0, 1, 3, 2))
        dQ = np.matmul(K, dS)
        return merge(dQ), merge(dK), merge(dV)

    return _emit(out, "attention", (q, k, v), grad_fn)


# ---------------------------------------------------------------------------
# losses and indexing
# ---------------------------------------------------------------------------


def _targets_matrix(targets, shape: tuple[int, int]) -> np.ndarray:
    c, N = shape
    t = np.asarray(targets)
    if np.issubdtype(t.dtype, np.integer):
        ids = t.reshape(-1)
        if ids.size != N:
            raise ShapeError(f"cross_entropy: {ids.size} targets for {N} columns")
        if ids.size and (ids.min() < 0 or ids.max() >= c):
            raise ValueError(f"cross_entropy: target id out of range [0, {c})")
        Y = np.zeros(shape)
        Y[ids, np.arange(N)] = 1.0
        return Y
    Y = np.asarray(t, dtype=np.float64)
    if Y.shape != shape:
        raise ShapeError(f"cross_entropy: soft targets {Y.shape} vs logits {shape}")
    return Y


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over columns of logsumexp(column) - <target, column>.

    ``targets`` is a vector of class ids (one per column) or a c x N matrix of
    probability columns.
    """
    Z = logits.data
    Y = _targets_matrix(targets, Z.shape)
    N = Z.shape[1]
    zmax = Z.max(axis=0, keepdims=True)
    e = np.exp(Z - zmax)
    se = e.sum(axis=0, keepdims=True)
    lse = np.log(se) + zmax
    per_col = lse[0] * Y.sum(axis=0) - (Y * Z).sum(axis=0)
    loss = per_col.mean().reshape(1, 1)
    P = e / se

    def grad_fn(g):
        return (g[0, 0] * (P * Y.sum(axis=0, keepdims=True) - Y) / N,)

    return _emit(loss, "cross_entropy", (logits,), grad_fn)


def mse(pred: Tensor, target) -> Tensor:
    """Half the squared Euclidean (Frobenius) distance, 0.5 * ||pred - target||^2."""
    Y = target.data if isinstance(target, Tensor) else _as_matrix(target)
    if Y.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {Y.shape}")
    r = pred.data - Y

    def grad_fn(g):
        return (g[0, 0] * r,)

    return _emit((0.5 * np.einsum("ij,ij->", r, r)).reshape(1, 1), "mse", (pred,), grad_fn)


def gather_cols(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Columns ``table[:, ids]``; gradients scatter-add back into the table."""
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.cols):
        raise IndexError(f"gather_cols: id out of range [0, {table.cols})")
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _emit(table.data[:, idx], "gather_cols", (table,), grad_fn)


def vec_blocks(a: Tensor, seq_len: int) -> Tensor:
    """Column-stack each d x seq_len block into one column: (d*seq_len) x B."""
    d, N = a.shape
    if N % seq_len:
        raise ShapeError(f"vec_blocks: {N} columns not divisible by {seq_len}")
    B = N // seq_len

    def fwd(x):
        return x.reshape(d, B, seq_len).transpose(2, 0, 1).reshape(seq_len * d, B)

    def grad_fn(g):
        return (g.reshape(seq_len, d, B).transpose(1, 2, 0).reshape(d, N),)

    return _emit(fwd(a.data), "vec_blocks", (a,), grad_fn)


def vec(a: Tensor) -> Tensor:
    """Column-major vectorization into a single column."""
    return vec_blocks(a, a.cols)
