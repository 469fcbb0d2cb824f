"""Seeded, serializable random streams (Philox counter-based generator)."""

from __future__ import annotations

import numpy as np


class RngState:
    """A Philox stream identified by ``(seed, stream)``.

    The full generator state can be exported with :meth:`state_words` and
    restored with :meth:`from_state_words`; checkpoints rely on this.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream)
        self.bitgen = np.random.Philox(np.random.SeedSequence([self.seed, self.stream]))
        self.gen = np.random.Generator(self.bitgen)

    def child(self, stream: int) -> "RngState":
        """Independent stream derived from the same seed."""
        return RngState(self.seed, stream)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.gen.standard_normal(shape) * std

    def uniform(self, shape=None) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self.gen.dirichlet(alpha, size=size)

    # -- serialization -----------------------------------------------------

    def state_words(self) -> list[int]:
        """Generator state flattened into unsigned 64-bit words."""
        st = self.bitgen.state
        inner = st["state"]
        return [
            self.seed,
            self.stream,
            *(int(w) for w in inner["counter"]),
            *(int(w) for w in inner["key"]),
            *(int(w) for w in st["buffer"]),
            int(st["buffer_pos"]),
            int(st["has_uint32"]),
            int(st["uinteger"]),
        ]

    @classmethod
    def from_state_words(cls, words: list[int]) -> "RngState":
        if len(words) != 15:
            raise ValueError(f"expected 15 state words, got {len(words)}")
        rng = cls(words[0], words[1])
        rng.bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(words[2:6], dtype=np.uint64),
                "key": np.array(words[6:8], dtype=np.uint64),
            },
            "buffer": np.array(words[8:12], dtype=np.uint64),
            "buffer_pos": words[12],
            "has_uint32": words[13],
            "uinteger": words[14],
        }
        return rng
