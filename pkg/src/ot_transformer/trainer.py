"""Training loop, evaluation and checkpoint plumbing."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as tc
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig
from .data import (CorpusSplit, CorruptionSpec, Vocab, build_vocab, corrupt_replace, encode, load_text,
                   sample_batch, split_corpus, eval_windows)
from .flow import DivergenceError, forward_logits, training_objective
from .optim import OptimState, adam_step, clip_grad_norm, lr_schedule
from .rng import RngState
from .tensor import Tape, Tensor, no_tape
from .transformer import Model, init_model

BATCH_STREAM = 2
EVAL_CHUNK = 16


@dataclass
class Corpus:
    vocab: Vocab
    split: CorpusSplit


def prepare_corpus(path: str | None = None, test_fraction: float = 0.1, text: str | None = None) -> Corpus:
    text = load_text(path) if text is None else text
    vocab = build_vocab(text)
    return Corpus(vocab, split_corpus(encode(text, vocab), test_fraction))


@dataclass
class MetricsRow:
    iteration: int
    train_loss: float
    test_loss: float
    transport_cost: float
    perplexity: float
    wall_ms: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FailureRecord:
    iteration: int  # index of the update that failed (0-based)
    kind: str
    detail: str
    step: int | None = None  # integration step, for divergence

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: Model
    vocab: Vocab
    history: list[MetricsRow]
    failure: FailureRecord | None = None
    final_test_loss: float | None = None  # full held-out split, when the run completed

    @property
    def diverged(self) -> bool:
        return self.failure is not None


Callback = Callable[[str, object], None]


def resolved_config(cfg: RunConfig, vocab: Vocab) -> RunConfig:
    """Tie the model's vocabulary size (and per-token output width) to the corpus."""
    over = {"model.vocab_size": len(vocab)}
    if cfg.model.head_kind == "per_token":
        over["model.n_outputs"] = len(vocab)
    return cfg.replace(**over)


def _weight_decay(model: Model, cfg: RunConfig) -> dict[int, float] | None:
    if not cfg.output_weight_decay:
        return None
    names = [n for n, _ in model.named_parameters()]
    return {names.index("output.psi_o"): cfg.output_weight_decay}


def make_checkpoint(cfg: RunConfig, vocab: Vocab, model: Model, opt: OptimState, rng: RngState,
                    iteration: int, history: list[MetricsRow]) -> Checkpoint:
    conf = cfg.to_dict()
    conf["vocab"] = "".join(vocab.chars)
    return Checkpoint(
        conf,
        [(n, t.data.copy()) for n, t in model.named_parameters()],
        OptimState([m.copy() for m in opt.m], [v.copy() for v in opt.v], opt.step, opt.beta1, opt.beta2, opt.eps),
        rng.state_words(),
        iteration,
        [r.to_dict() for r in history],
    )


def restore(ckpt: Checkpoint) -> tuple[RunConfig, Vocab, Model]:
    """Rebuild config, vocabulary and model from a checkpoint."""
    raw = dict(ckpt.config)
    try:
        vocab = Vocab(tuple(raw.pop("vocab")))
        cfg = RunConfig.from_dict(raw)
    except (KeyError, ConfigError) as err:
        raise CheckpointError(f"checkpoint config is invalid: {err}") from None
    model = init_model(cfg.model, cfg.seed)
    named = model.named_parameters()
    if [n for n, _ in named] != [n for n, _ in ckpt.tensors]:
        raise CheckpointError("checkpoint tensors do not match the model layout")
    for (_, t), (_, arr) in zip(named, ckpt.tensors):
        if t.data.shape != arr.shape:
            raise CheckpointError(f"tensor {t.name} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
    return cfg, vocab, model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def batch_nll(model: Model, inputs: np.ndarray, targets: np.ndarray, mode: str) -> float:
    """Summed next-token NLL over a batch (no tape)."""
    with no_tape():
        logits, _ = forward_logits(model, inputs, mode)
        z = logits.data
        zmax = z.max(axis=0)
        lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
        t = np.asarray(targets).reshape(-1)
        return float(np.sum(lse - z[t, np.arange(z.shape[1])]))


def mean_nll(model: Model, inputs: np.ndarray, targets: np.ndarray, mode: str,
             chunk: int = EVAL_CHUNK) -> float:
    total = 0.0
    for s in range(0, len(inputs), chunk):
        total += batch_nll(model, inputs[s:s + chunk], targets[s:s + chunk], mode)
    return total / targets.size


def tiled_windows(n_tokens: int, n_ctx: int) -> np.ndarray:
    """Offsets of the non-overlapping windows covering a split (targets need one extra token)."""
    count = (n_tokens - 1) // n_ctx
    if count < 1:
        raise ConfigError(f"test split of {n_tokens} tokens is shorter than the context {n_ctx}")
    return (np.arange(count) * n_ctx)[:, None] + np.arange(n_ctx)[None, :]


def evaluate(model: Model, ids: np.ndarray, mode: str, corruption: CorruptionSpec | None = None,
             vocab_size: int | None = None) -> float:
    """Mean per-token NLL over the full split in non-overlapping windows.

    With ``corruption`` only the inputs are corrupted; targets stay clean.
    """
    ids = np.asarray(ids, dtype=np.int64)
    offs = tiled_windows(len(ids), model.cfg.n_ctx)
    src = ids
    if corruption is not None and corruption.replace_rate > 0:
        src = corrupt_replace(ids, vocab_size or model.cfg.vocab_size, corruption)
    return mean_nll(model, src[offs], ids[offs + 1], mode)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(cfg: RunConfig, corpus: Corpus | None = None, mode: str | None = None,
          callbacks: Iterable[Callback] = (), resume_from: Checkpoint | None = None,
          stop_after: int | None = None, final_eval: bool = True) -> TrainResult:
    """Run (or resume) training to ``cfg.iters`` updates.

    Callbacks receive ``("row", MetricsRow)`` after each evaluation and
    ``("checkpoint", Checkpoint)`` every ``checkpoint_interval`` updates.
    ``stop_after`` halts early (used to split runs); the schedule still
    targets ``cfg.iters``.
    """
    if mode is not None and mode != cfg.mode:
        cfg = cfg.replace(mode=mode)
    if corpus is None:
        corpus = prepare_corpus(cfg.corpus, cfg.test_fraction)
    cfg = resolved_config(cfg, corpus.vocab)
    callbacks = list(callbacks)

    if resume_from is None:
        model = init_model(cfg.model, cfg.seed)
        params = model.parameters()
        opt = OptimState.for_params(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
        rng = RngState(cfg.seed, BATCH_STREAM)
        start, history = 0, []
    else:
        ck_cfg, ck_vocab, model = restore(resume_from)
        if ck_vocab != corpus.vocab:
            raise CheckpointError("checkpoint vocabulary differs from the corpus")
        if ck_cfg.replace(iters=cfg.iters, out_dir=cfg.out_dir, plots=cfg.plots,
                          checkpoint_interval=cfg.checkpoint_interval) != cfg:
            raise CheckpointError("checkpoint was written with a different configuration")
        params = model.parameters()
        o = resume_from.optim
        opt = OptimState([m.copy() for m in o.m], [v.copy() for v in o.v], o.step, o.beta1, o.beta2, o.eps)
        rng = RngState.from_state_words(resume_from.rng_words)
        start = resume_from.iteration
        history = [MetricsRow(**r) for r in resume_from.metrics]

    ev_in, ev_tg = eval_windows(corpus.split.test, cfg.model.n_ctx, cfg.eval_windows, cfg.seed)
    wd = _weight_decay(model, cfg)
    end = cfg.iters if stop_after is None else min(cfg.iters, stop_after)
    failure = None
    t0 = time.perf_counter()

    def emit(kind, payload):
        for cb in callbacks:
            cb(kind, payload)

    it = start
    for it in range(start, end):
        batch = sample_batch(corpus.split.train, cfg.model.n_ctx, cfg.batch_size, rng)
        try:
            with Tape() as tape:
                parts = training_objective(batch, model, cfg.mode)
            if not math.isfinite(parts.loss.item()):
                raise DivergenceError(-1, "non-finite loss")
            tc.backward(tape, parts.loss)
            tape.release()
            gnorm = clip_grad_norm(params, cfg.clip_norm)
            if not math.isfinite(gnorm):
                raise DivergenceError(-1, "non-finite gradient")
        except DivergenceError as err:
            tape.release()
            model.zero_grad()
            failure = FailureRecord(it, "divergence", err.reason, None if err.step < 0 else err.step)
            emit("failure", failure)
            break
        adam_step(params, opt, lr_schedule(it, cfg.iters, cfg.lr_max, cfg.lr_min), wd)
        done = it + 1
        if done % cfg.eval_interval == 0 or done == cfg.iters:
            test_loss = mean_nll(model, ev_in, ev_tg, cfg.mode)
            wall = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else None
            row = MetricsRow(done, parts.terminal_loss, test_loss, parts.transport_cost,
                             math.exp(test_loss), wall)
            history.append(row)
            emit("row", row)
        if cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0:
            emit("checkpoint", make_checkpoint(cfg, corpus.vocab, model, opt, rng, done, history))

    iteration = opt.step
    ckpt = make_checkpoint(cfg, corpus.vocab, model, opt, rng, iteration, history)
    final = None
    if failure is None and final_eval and iteration == cfg.iters:
        final = evaluate(model, corpus.split.test, cfg.mode)
    return TrainResult(ckpt, model, corpus.vocab, history, failure, final)


# ---------------------------------------------------------------------------
# linear regression fit (synthetic-data sanity check)
# ---------------------------------------------------------------------------


def fit_linear(X: np.ndarray, y: np.ndarray, iters: int = 3000, lr_max: float = 5e-2,
               lr_min: float = 1e-5, seed: int = 0) -> tuple[np.ndarray, float]:
    """Fit y ~ W x with the package's Adam and cosine schedule; returns (W, final MSE).

    ``X`` is N x p (rows are vec(X0)), ``y`` is N x c.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    W = Tensor(RngState(seed, 5).normal((y.shape[1], X.shape[1]), 0.01), requires_grad=True, name="W")
    opt = OptimState.for_params([W])
    Xt, Yt = Tensor(X.T), y.T
    for it in range(iters):
        with Tape() as tape:
            loss = tc.scale(tc.mse(W @ Xt, Yt), 2.0 / y.size)
        tc.backward(tape, loss)
        tape.release()
        adam_step([W], opt, lr_schedule(it, iters, lr_max, lr_min))
    resid = W.data @ X.T - y.T
    return W.data.copy(), float(np.mean(resid**2))
