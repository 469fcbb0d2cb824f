"""Forward-Euler flow of hidden states with transport-cost accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tc
from .tensor import Tensor
from .transformer import Model, ModelConfig, StackParams, block_forward, embed, output_head, stack_forward

Field = Callable[[Tensor, float], Tensor]

DIVERGENCE_NORM = 1e8
MODES = ("ot", "node", "discrete")


class DivergenceError(FloatingPointError):
    """Hidden state became non-finite or exploded during integration."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"integration diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason


@dataclass
class FlowTrace:
    """States X_0..X_M, velocities f(X_m, t_m) and the transport cost.

    With ``record=False`` only the terminal state is kept in ``states``.
    """

    states: list[Tensor]
    velocities: list[Tensor]
    transport_cost: Tensor
    dt: float
    times: list[float] = field(default_factory=list)

    @property
    def terminal(self) -> Tensor:
        return self.states[-1]


def _check_finite(X: np.ndarray, step: int) -> None:
    if not np.isfinite(X).all():
        raise DivergenceError(step, "non-finite hidden state")
    norm = float(np.sqrt(np.einsum("ij,ij->", X, X)))
    if norm > DIVERGENCE_NORM:
        raise DivergenceError(step, f"state norm {norm:.3e} exceeds {DIVERGENCE_NORM:.0e}")


def stack_field(stack: StackParams, cfg: ModelConfig, seq_len: int | None = None,
                mlp_skip: bool = True) -> Field:
    def f(X: Tensor, t: float) -> Tensor:
        return stack_forward(X, stack, cfg, t, seq_len, mlp_skip=mlp_skip)

    return f


def integrate_field(X0: Tensor, f: Field, T: float, M: int, record: bool = True,
                    t0: float = 0.0) -> FlowTrace:
    """X_{m+1} = X_m + dt f(X_m, t_m), cost = (dt/2) sum_m ||f(X_m, t_m)||_F^2."""
    if M < 1:
        raise ValueError(f"need at least one integration step, got M={M}")
    dt = T / M
    X = X0
    states, vels, times = [X0], [], []
    sq = None
    for m in range(M):
        t = t0 + m * dt
        v = f(X, t)
        nsq = tc.frobenius_norm_sq(v)
        sq = nsq if sq is None else sq + nsq
        X = X + tc.scale(v, dt)
        _check_finite(X.data, m + 1)
        if record:
            states.append(X)
            vels.append(v)
            times.append(t)
    if record:
        times.append(t0 + T)
    else:
        states = [X]
    return FlowTrace(states, vels, tc.scale(sq, dt / 2.0), dt, times)


def euler_integrate(X0: Tensor, stack: StackParams | Field, cfg: ModelConfig, record: bool = True,
                    seq_len: int | None = None) -> FlowTrace:
    """Integrate dX/dt = f(X, t; theta) over [0, T] in cfg.M Euler steps.

    ``stack`` is either the block stack (the velocity field is the whole
    composition f_D o ... o f_1) or any callable ``f(X, t)``.
    """
    f = stack if callable(stack) else stack_field(stack, cfg, seq_len)
    return integrate_field(X0, f, cfg.T, cfg.M, record)


def node_block_integrate(X0: Tensor, stack: StackParams, cfg: ModelConfig, record: bool = True,
                         seq_len: int | None = None, steps_per_block: int | None = None) -> FlowTrace:
    """Chain of per-block flows: block i drives its own ODE on [0, T].

    Each block is integrated for M/D steps (or ``steps_per_block``), its MLP
    without skip connection; the per-block transport costs are summed.
    """
    D = len(stack.blocks)
    if steps_per_block is None:
        if cfg.M % D:
            raise ValueError(f"M={cfg.M} is not divisible by D={D}; pass steps_per_block")
        steps_per_block = cfg.M // D
    X = X0
    states, vels, times = [X0], [], []
    cost = None
    dt = cfg.T / steps_per_block
    for block in stack.blocks:
        def f(Z: Tensor, t: float, block=block) -> Tensor:
            if cfg.time_conditioning == "append-scalar":
                Z = tc.add(Z, tc.scale(stack.time_vec, t))
            return block_forward(Z, block, cfg.causal_mask, seq_len, cfg.ln_placement,
                                 cfg.ln_eps, mlp_skip=False)

        tr = integrate_field(X, f, cfg.T, steps_per_block, record)
        X = tr.terminal
        cost = tr.transport_cost if cost is None else cost + tr.transport_cost
        if record:
            states.extend(tr.states[1:])
            vels.extend(tr.velocities)
            times.extend(tr.times[:-1])
    if record:
        times.append(cfg.T)
    else:
        states = [X]
    return FlowTrace(states, vels, cost, dt, times)


def discrete_forward(X0: Tensor, stack: StackParams, cfg: ModelConfig,
                     seq_len: int | None = None) -> FlowTrace:
    """Baseline: one residual application of the stack, X_0 + f(X_0).

    Returned as a single-step trace whose cost 0.5 ||f(X_0)||_F^2 is a
    diagnostic only; the discrete objective never includes it.
    """
    v = stack_forward(X0, stack, cfg, 0.0, seq_len)
    X1 = X0 + v
    _check_finite(X1.data, 1)
    return FlowTrace([X0, X1], [v], tc.scale(tc.frobenius_norm_sq(v), 0.5), 1.0, [0.0, 1.0])


@dataclass
class ObjectiveParts:
    loss: Tensor
    terminal_loss: float
    transport_cost: float  # per sample, before multiplying by lambda
    logits: Tensor
    trace: FlowTrace | None = None


def forward_logits(model: Model, inputs: np.ndarray, mode: str = "ot",
                   record: bool = False) -> tuple[Tensor, FlowTrace | None]:
    """Embed a B x n batch, propagate in the given mode, apply the head."""
    cfg = model.cfg
    ids = np.atleast_2d(np.asarray(inputs))
    n = ids.shape[1]
    X0 = embed(ids, model.embedding)
    trace = None
    if mode == "ot":
        trace = euler_integrate(X0, model.stack, cfg, record, seq_len=n)
        XT = trace.terminal
    elif mode == "node":
        trace = node_block_integrate(X0, model.stack, cfg, record, seq_len=n)
        XT = trace.terminal
    elif mode == "discrete":
        trace = discrete_forward(X0, model.stack, cfg, seq_len=n)
        XT = trace.terminal
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return output_head(XT, model.output, seq_len=n), trace


def training_objective(batch: tuple[np.ndarray, np.ndarray], model: Model, mode: str = "ot",
                       record: bool = False) -> ObjectiveParts:
    """Batch mean of terminal loss + lambda * (dt/2) sum_m ||f(X_m, t_m)||_F^2.

    Next-token targets use per-token cross entropy averaged over tokens; a
    pooled head uses 0.5||psi vec(X) - y||^2 per sequence. With
    ``normalize_by_tokens`` the cost is divided by the sequence length too,
    which is the per-sequence objective (summed CE plus cost) divided by n.
    ``discrete`` mode ignores lambda.
    """
    inputs, targets = batch
    cfg = model.cfg
    ids = np.atleast_2d(np.asarray(inputs))
    B, n = ids.shape
    logits, trace = forward_logits(model, ids, mode, record)
    if model.output.kind == "per_token":
        term = tc.cross_entropy(logits, np.asarray(targets).reshape(-1))
    else:
        Y = np.asarray(targets, dtype=np.float64).reshape(B, -1).T
        term = tc.scale(tc.mse(logits, Y), 1.0 / B)
    per_sample = 1.0 / B / (n if cfg.normalize_by_tokens else 1)
    cost = tc.scale(trace.transport_cost, per_sample)
    if mode == "discrete":
        return ObjectiveParts(term, term.item(), cost.item(), logits, trace)
    loss = term + tc.scale(cost, cfg.lam)
    return ObjectiveParts(loss, term.item(), cost.item(), logits, trace)


@dataclass
class Straightness:
    velocity_dispersion: float
    chord_deviation: float


def straightness_metrics(trace: FlowTrace, eps: float = 1e-12) -> Straightness:
    """Relative spread of velocities and max distance of states from the chord X_0 -> X_M."""
    if len(trace.states) < 2 or not trace.velocities:
        raise ValueError("straightness needs a recorded trace")
    v0 = trace.velocities[0].data
    n0 = np.linalg.norm(v0)
    disp = max(np.linalg.norm(v.data - v0) for v in trace.velocities) / (n0 + eps)
    X0 = trace.states[0].data
    u = trace.states[-1].data - X0
    uu = float(np.sum(u * u))
    worst = 0.0
    for S in trace.states:
        p = S.data - X0
        s = 0.0 if uu == 0.0 else min(1.0, max(0.0, float(np.sum(p * u)) / uu))
        worst = max(worst, float(np.linalg.norm(p - s * u)))
    return Straightness(float(disp), worst / (np.sqrt(uu) + eps))
