"""Transformer blocks, token embedding, output head and terminal losses.

Hidden states are d x N matrices whose columns are tokens. A batch of B
sequences of length n is laid out as N = B*n columns, sequence b occupying
columns ``b*n:(b+1)*n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as tc
from .rng import RngState
from .tensor import Tensor

LN_PLACEMENTS = ("pre", "post")
TIME_MODES = ("none", "append-scalar")
HEAD_KINDS = ("per_token", "pooled")


@dataclass
class ModelConfig:
    d: int = 64
    H: int = 4
    D: int = 2
    n_ctx: int = 128
    vocab_size: int = 65
    k: int | None = None  # per-head width; defaults to d // H
    T: float = 1.0
    M: int = 8
    lam: float = 1.0
    causal_mask: bool = True
    ln_placement: str = "pre"
    time_conditioning: str = "none"
    normalize_by_tokens: bool = True  # cost per token, on the scale of the token-mean CE
    head_kind: str = "per_token"
    n_outputs: int | None = None  # c; defaults to vocab_size
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.k is None:
            self.k = max(1, self.d // self.H)
        if self.n_outputs is None:
            self.n_outputs = self.vocab_size
        self.validate()

    @property
    def dt(self) -> float:
        return self.T / self.M

    def validate(self) -> None:
        for name in ("d", "H", "D", "k", "M", "n_ctx", "vocab_size", "n_outputs", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.ln_placement not in LN_PLACEMENTS:
            raise ValueError(f"ln_placement must be one of {LN_PLACEMENTS}")
        if self.time_conditioning not in TIME_MODES:
            raise ValueError(f"time_conditioning must be one of {TIME_MODES}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class AttentionHeadParams:
    """Views of one head's Q, K, V (k x d) and W (d x k) inside the stacked block weights."""

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    W: np.ndarray


@dataclass
class BlockParams:
    wq: Tensor  # (H*k) x d, head h in rows h*k:(h+1)*k
    wk: Tensor
    wv: Tensor
    wo: Tensor  # d x (H*k), head h in columns h*k:(h+1)*k
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    n_heads: int

    def head(self, h: int) -> AttentionHeadParams:
        k = self.wq.rows // self.n_heads
        rows = slice(h * k, (h + 1) * k)
        return AttentionHeadParams(
            self.wq.data[rows], self.wk.data[rows], self.wv.data[rows], self.wo.data[:, rows]
        )

    @property
    def heads(self) -> list[AttentionHeadParams]:
        return [self.head(h) for h in range(self.n_heads)]

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            if f.name != "n_heads":
                yield f.name, getattr(self, f.name)


@dataclass
class StackParams:
    blocks: list[BlockParams]
    time_vec: Tensor | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for i, b in enumerate(self.blocks):
            for name, t in b.named():
                yield f"blocks.{i}.{name}", t
        if self.time_vec is not None:
            yield "time_vec", self.time_vec


@dataclass
class EmbeddingParams:
    token_table: Tensor  # d x vocab
    pos_table: Tensor  # d x n_ctx


@dataclass
class OutputParams:
    psi_o: Tensor  # c x d (per_token) or c x (d*n) (pooled)
    kind: str = "per_token"


@dataclass
class Model:
    cfg: ModelConfig
    embedding: EmbeddingParams
    stack: StackParams
    output: OutputParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters in their fixed declaration order (checkpoint order)."""
        out = [
            ("embedding.token_table", self.embedding.token_table),
            ("embedding.pos_table", self.embedding.pos_table),
        ]
        out += [(f"stack.{n}", t) for n, t in self.stack.named()]
        out.append(("output.psi_o", self.output.psi_o))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def init_block(cfg: ModelConfig, rng: RngState) -> BlockParams:
    d, hk, hid = cfg.d, cfg.H * cfg.k, cfg.mlp_ratio * cfg.d
    std = cfg.init_std
    out_std = std / math.sqrt(2 * cfg.D)
    return BlockParams(
        wq=_param(rng.normal((hk, d), std), "wq"),
        wk=_param(rng.normal((hk, d), std), "wk"),
        wv=_param(rng.normal((hk, d), std), "wv"),
        wo=_param(rng.normal((d, hk), out_std), "wo"),
        ln1_gain=_param(np.ones((d, 1)), "ln1_gain"),
        ln1_bias=_param(np.zeros((d, 1)), "ln1_bias"),
        ln2_gain=_param(np.ones((d, 1)), "ln2_gain"),
        ln2_bias=_param(np.zeros((d, 1)), "ln2_bias"),
        mlp_w1=_param(rng.normal((hid, d), std), "mlp_w1"),
        mlp_b1=_param(np.zeros((hid, 1)), "mlp_b1"),
        mlp_w2=_param(rng.normal((d, hid), out_std), "mlp_w2"),
        mlp_b2=_param(np.zeros((d, 1)), "mlp_b2"),
        n_heads=cfg.H,
    )


def init_model(cfg: ModelConfig, seed: int) -> Model:
    """Normal(0, init_std) matrices, zero biases, unit LN gains.

    Output projections of both residual branches use init_std / sqrt(2D).
    """
    rng = RngState(seed, stream=1)
    std = cfg.init_std
    embedding = EmbeddingParams(
        token_table=_param(rng.normal((cfg.d, cfg.vocab_size), std), "token_table"),
        pos_table=_param(rng.normal((cfg.d, cfg.n_ctx), std), "pos_table"),
    )
    blocks = [init_block(cfg, rng) for _ in range(cfg.D)]
    time_vec = None
    if cfg.time_conditioning == "append-scalar":
        time_vec = _param(rng.normal((cfg.d, 1), std), "time_vec")
    width = cfg.d if cfg.head_kind == "per_token" else cfg.d * cfg.n_ctx
    output = OutputParams(_param(rng.normal((cfg.n_outputs, width), std), "psi_o"), cfg.head_kind)
    return Model(cfg, embedding, StackParams(blocks, time_vec), output)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def embed(tokens, params: EmbeddingParams) -> Tensor:
    """Token plus positional embedding.

    ``tokens`` is a length-n sequence or a B x n array; column b*n + j of the
    result is ``token_table[:, z_bj] + pos_table[:, j]``.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, n = ids.shape
    vocab = params.token_table.cols
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"token id out of range [0, {vocab})")
    if n > params.pos_table.cols:
        raise ValueError(f"sequence length {n} exceeds context {params.pos_table.cols}")
    tok = tc.gather_cols(params.token_table, ids.reshape(-1))
    pos = tc.gather_cols(params.pos_table, np.tile(np.arange(n), B))
    return tok + pos


def _attend(X: Tensor, block: BlockParams, causal: bool, seq_len: int | None) -> Tensor:
    heads = tc.attention(block.wq @ X, block.wk @ X, block.wv @ X, block.n_heads, seq_len, causal)
    return block.wo @ heads


def mhsa(X: Tensor, block: BlockParams, causal: bool = False, seq_len: int | None = None,
         ln_placement: str = "pre", eps: float = 1e-5) -> Tensor:
    """Multi-head self-attention with skip connection.

    pre-LN:  x + sum_h W V LN(X) softmax(...)
    post-LN: LN(x + sum_h W V X softmax(...))
    """
    if ln_placement == "pre":
        h = tc.layer_norm(X, block.ln1_gain, block.ln1_bias, eps)
        return X + _attend(h, block, causal, seq_len)
    return tc.layer_norm(X + _attend(X, block, causal, seq_len), block.ln1_gain, block.ln1_bias, eps)


def mlp(U: Tensor, block: BlockParams) -> Tensor:
    hidden = tc.gelu(tc.add(block.mlp_w1 @ U, block.mlp_b1))
    return tc.add(block.mlp_w2 @ hidden, block.mlp_b2)


def block_forward(X: Tensor, block: BlockParams, causal: bool = False, seq_len: int | None = None,
                  ln_placement: str = "pre", eps: float = 1e-5, mlp_skip: bool = True) -> Tensor:
    """Attention then per-token MLP.

    ``mlp_skip=False`` drops the MLP's skip connection (the per-block
    velocity of the N-ODE comparator).
    """
    U = mhsa(X, block, causal, seq_len, ln_placement, eps)
    if ln_placement == "pre":
        branch = mlp(tc.layer_norm(U, block.ln2_gain, block.ln2_bias, eps), block)
        return U + branch if mlp_skip else branch
    inner = U + mlp(U, block) if mlp_skip else mlp(U, block)
    return tc.layer_norm(inner, block.ln2_gain, block.ln2_bias, eps)


def stack_forward(X: Tensor, stack: StackParams, cfg: ModelConfig, t: float | None = None,
                  seq_len: int | None = None, causal: bool | None = None,
                  mlp_skip: bool = True) -> Tensor:
    """f(X, t) = f_D(...f_1(X)...).

    With ``time_conditioning='append-scalar'`` the learned vector ``time_vec``
    scaled by t is added to every token before block 1; otherwise t is ignored.
    """
    causal = cfg.causal_mask if causal is None else causal
    if cfg.time_conditioning == "append-scalar":
        if t is None:
            raise ValueError("time-conditioned stack needs t")
        X = tc.add(X, tc.scale(stack.time_vec, t))
    for block in stack.blocks:
        X = block_forward(X, block, causal, seq_len, cfg.ln_placement, cfg.ln_eps, mlp_skip)
    return X


def output_head(X_T: Tensor, out: OutputParams, seq_len: int | None = None) -> Tensor:
    """Logits: psi_o x_j per token, or psi_o vec(X) per sequence (pooled)."""
    if out.kind == "per_token":
        if out.psi_o.cols != X_T.rows:
            raise tc.ShapeError(f"per-token head {out.psi_o.shape} vs states {X_T.shape}")
        return out.psi_o @ X_T
    n = X_T.cols if seq_len is None else seq_len
    if out.psi_o.cols != X_T.rows * n:
        raise tc.ShapeError(f"pooled head {out.psi_o.shape} vs {X_T.rows}x{n} states")
    return out.psi_o @ tc.vec_blocks(X_T, n)


cross_entropy = tc.cross_entropy
mse = tc.mse


# ---------------------------------------------------------------------------
# closed-form terminal-loss gradients
# ---------------------------------------------------------------------------


def operator_norm(psi: np.ndarray, tol: float = 1e-15, max_iters: int = 20000) -> float:
    """Largest singular value by power iteration on psi^T psi (no SVD)."""
    psi = np.asarray(psi, dtype=np.float64)
    if not psi.any():
        return 0.0
    gram = psi.T @ psi
    v = np.random.default_rng(12345).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        w = gram @ v
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            break
        v = w / nrm
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return math.sqrt(max(lam, 0.0))


@dataclass
class TerminalLossSpec:
    """Convex terminal loss G(X, y) = loss(head(X), y) with a linear head psi_o.

    ``kind`` is ``'mse'`` (0.5||psi x - y||^2) or ``'softmax_ce'``
    (logsumexp(psi x) - y^T psi x, y on the simplex). With ``per_token`` the
    head acts on each column and G sums over columns; otherwise it acts on
    the column-major vectorization of X.
    """

    kind: str
    psi_o: np.ndarray
    per_token: bool = False
    _L: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("mse", "softmax_ce"):
            raise ValueError(f"unknown terminal loss kind {self.kind!r}")
        self.psi_o = np.asarray(self.psi_o, dtype=np.float64)

    @property
    def L(self) -> float:
        if self._L is None:
            self._L = operator_norm(self.psi_o)
        return self._L

    def _flat(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X if self.per_token else X.reshape(-1, 1, order="F")

    def head(self, X: np.ndarray) -> np.ndarray:
        """Model output: psi x (mse) or softmax(psi x) (softmax_ce), columnwise."""
        Z = self.psi_o @ self._flat(X)
        if self.kind == "mse":
            return Z
        return _softmax(Z)

    def value(self, X: np.ndarray, y: np.ndarray) -> float:
        Z = self.psi_o @ self._flat(X)
        Y = np.asarray(y, dtype=np.float64).reshape(Z.shape, order="F")
        if self.kind == "mse":
            return 0.5 * float(np.sum((Z - Y) ** 2))
        zmax = Z.max(axis=0, keepdims=True)
        lse = np.log(np.exp(Z - zmax).sum(axis=0)) + zmax[0]
        return float(np.sum(lse * Y.sum(axis=0)) - np.sum(Y * Z))


def _softmax(Z: np.ndarray) -> np.ndarray:
    e = np.exp(Z - Z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def analytic_loss_grad(spec: TerminalLossSpec, X_T, y) -> np.ndarray:
    """Closed-form gradient of G w.r.t. X_T.

    mse: psi^T (psi x - y);  softmax_ce: psi^T softmax(psi x) - psi^T y.
    """
    X = X_T.data if isinstance(X_T, Tensor) else np.asarray(X_T, dtype=np.float64)
    x = spec._flat(X)
    Z = spec.psi_o @ x
    Y = np.asarray(y, dtype=np.float64).reshape(Z.shape, order="F")
    if spec.kind == "mse":
        g = spec.psi_o.T @ (Z - Y)
    else:
        g = spec.psi_o.T @ _softmax(Z) * Y.sum(axis=0, keepdims=True) - spec.psi_o.T @ Y
    return g if spec.per_token else g.reshape(X.shape, order="F")
