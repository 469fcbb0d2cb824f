"""Character-level corpora, batching, test-time corruption and synthetic regression data."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .rng import RngState

ENCODED_MAGIC = b"OTTD"
ENCODED_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    chars: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise CorpusError("vocabulary characters must be unique")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.chars)})

    def __len__(self) -> int:
        return len(self.chars)

    def id_of(self, ch: str) -> int:
        return self._index[ch]


def build_vocab(text: str) -> Vocab:
    if not text:
        raise CorpusError("cannot build a vocabulary from empty text")
    return Vocab(tuple(sorted(set(text))))


def encode(text: str, vocab: Vocab) -> np.ndarray:
    index = vocab._index
    try:
        return np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
    except KeyError as err:
        raise CorpusError(f"character {err.args[0]!r} is not in the vocabulary") from None


def decode(ids, vocab: Vocab) -> str:
    return "".join(vocab.chars[int(i)] for i in ids)


@dataclass
class CorpusSplit:
    train: np.ndarray
    test: np.ndarray
    test_fraction: float


def split_corpus(ids: np.ndarray, test_fraction: float = 0.1) -> CorpusSplit:
    """Contiguous split, the final ``test_fraction`` of the corpus held out."""
    ids = np.asarray(ids, dtype=np.int64)
    n_test = int(round(len(ids) * test_fraction))
    if n_test < 1 or n_test >= len(ids):
        raise CorpusError(f"split leaves an empty part (length {len(ids)}, fraction {test_fraction})")
    return CorpusSplit(ids[:-n_test], ids[-n_test:], test_fraction)


def default_corpus_path() -> Path:
    """Bundled public-domain corpus (eight Shakespeare plays, ~1 MB ASCII)."""
    return Path(str(resources.files("ot_transformer") / "data" / "shakespeare.txt"))


def load_text(path: str | Path | None = None) -> str:
    path = default_corpus_path() if path is None else Path(path)
    text = path.read_text(encoding="utf-8")
    if not text:
        raise CorpusError(f"{path} is empty")
    return text


@dataclass(frozen=True)
class CorruptionSpec:
    replace_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.replace_rate <= 1.0:
            raise ValueError(f"replace_rate must lie in [0, 1], got {self.replace_rate}")


def corrupt_replace(ids, vocab_size: int, spec: CorruptionSpec) -> np.ndarray:
    """Independently replace each position, with probability ``replace_rate``,
    by a uniformly drawn id from the whole vocabulary (which may equal the
    original)."""
    ids = np.asarray(ids, dtype=np.int64)
    rng = RngState(spec.seed, stream=7)
    hit = rng.uniform(ids.shape) < spec.replace_rate
    repl = rng.integers(0, vocab_size, size=ids.shape)
    return np.where(hit, repl, ids)


def sample_batch(ids: np.ndarray, n_ctx: int, batch_size: int, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Random contiguous windows; targets are the inputs shifted by one."""
    if len(ids) <= n_ctx:
        raise CorpusError(f"corpus of length {len(ids)} is too short for context {n_ctx}")
    starts = rng.integers(0, len(ids) - n_ctx, size=batch_size)
    offs = starts[:, None] + np.arange(n_ctx)[None, :]
    return ids[offs], ids[offs + 1]


def eval_windows(ids: np.ndarray, n_ctx: int, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed evaluation windows (same for every evaluation of a run)."""
    return sample_batch(ids, n_ctx, count, RngState(seed, stream=3))


# ---------------------------------------------------------------------------
# encoded-corpus cache
# ---------------------------------------------------------------------------


def save_encoded(path: str | Path, ids: np.ndarray, vocab: Vocab) -> None:
    """Header ``OTTD``, u32 version, u32 vocab size, code points (u32), u64 count, ids (u16)."""
    ids = np.asarray(ids)
    if len(vocab) > 65536:
        raise CorpusError("vocabulary too large for u16 ids")
    with open(path, "wb") as fh:
        fh.write(ENCODED_MAGIC)
        fh.write(struct.pack("<II", ENCODED_VERSION, len(vocab)))
        fh.write(np.array([ord(c) for c in vocab.chars], dtype="<u4").tobytes())
        fh.write(struct.pack("<Q", len(ids)))
        fh.write(ids.astype("<u2").tobytes())


def load_encoded(path: str | Path) -> tuple[np.ndarray, Vocab]:
    raw = Path(path).read_bytes()
    if raw[:4] != ENCODED_MAGIC:
        raise CorpusError(f"{path}: not an encoded corpus")
    try:
        version, nv = struct.unpack_from("<II", raw, 4)
        if version != ENCODED_VERSION:
            raise CorpusError(f"{path}: unsupported version {version}")
        pos = 12
        cps = np.frombuffer(raw, dtype="<u4", count=nv, offset=pos)
        pos += 4 * nv
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if len(raw) != pos + 2 * count:
            raise CorpusError(f"{path}: truncated or padded token section")
        ids = np.frombuffer(raw, dtype="<u2", count=count, offset=pos).astype(np.int64)
    except struct.error as err:
        raise CorpusError(f"{path}: truncated header") from err
    return ids, Vocab(tuple(chr(int(c)) for c in cps))


# ---------------------------------------------------------------------------
# synthetic regression
# ---------------------------------------------------------------------------


@dataclass
class SynthRegression:
    A: np.ndarray  # d x d mixing applied to X0
    psi: np.ndarray  # c x (d*n) pooled readout
    X0: np.ndarray  # N x d x n
    y: np.ndarray  # N x c

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.X0, self.y))


def synth_regression(N: int, d: int, n: int, noise: float, rng: RngState, c: int | None = None,
                     identity: bool = False) -> SynthRegression:
    """Pairs (X0, y) with y = psi* vec(A* X0) + noise.

    ``identity=True`` uses A* = I and psi* = I (so c = d*n and y = vec(X0)).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if identity:
        A, psi = np.eye(d), np.eye(d * n)
    else:
        c = c or d
        A = rng.normal((d, d)) / np.sqrt(d)
        psi = rng.normal((c, d * n)) / np.sqrt(d * n)
    X0 = rng.normal((N, d, n))
    mixed = np.einsum("ij,njk->nik", A, X0)
    flat = mixed.transpose(0, 2, 1).reshape(N, d * n)  # column-major vec per sample
    y = flat @ psi.T
    if noise:
        y = y + noise * rng.normal(y.shape)
    return SynthRegression(A, psi, X0, y)
