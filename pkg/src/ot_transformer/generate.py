"""Autoregressive character sampling from a trained model."""

from __future__ import annotations

import numpy as np

from .data import CorpusError, Vocab, decode, encode
from .flow import forward_logits
from .rng import RngState
from .tensor import no_tape
from .transformer import Model

SAMPLE_STREAM = 21


def generate(model: Model, vocab: Vocab, prompt: str, length: int, temperature: float = 0.0,
             seed: int = 0, mode: str = "ot") -> str:
    """Extend ``prompt`` by ``length`` characters.

    Each step recomputes the forward pass over the last n_ctx characters.
    ``temperature == 0`` picks the argmax; otherwise sampling from
    softmax(logits / temperature) with a seeded stream.
    """
    if length < 0:
        raise ValueError("length must be >= 0")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if not prompt:
        raise CorpusError("prompt must contain at least one character")
    ids = list(encode(prompt, vocab))
    rng = RngState(seed, SAMPLE_STREAM)
    n_ctx = model.cfg.n_ctx
    with no_tape():
        for _ in range(length):
            window = np.asarray(ids[-n_ctx:])[None, :]
            logits, _ = forward_logits(model, window, mode)
            z = logits.data[:, -1]
            if temperature == 0.0:
                nxt = int(np.argmax(z))
            else:
                p = np.exp((z - z.max()) / temperature)
                p /= p.sum()
                nxt = int(np.searchsorted(np.cumsum(p), rng.uniform() * p.sum(), side="right"))
                nxt = min(nxt, len(p) - 1)
            ids.append(nxt)
    return decode(ids, vocab)
