"""Binary checkpoint format.

Layout (all little-endian)::

    b"OTTC" | u32 version
    u64 len | canonical config JSON (includes the vocabulary)
    u32 count | per tensor: u32 name len | name | u32 rows | u32 cols | f64 data
    optimizer: u64 step | f64 beta1 | f64 beta2 | f64 eps | m buffers | v buffers
    rng: u32 count | u64 words
    u64 iteration
    u64 len | metrics JSON
    8-byte blake2b digest of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import OptimState

MAGIC = b"OTTC"
VERSION = 1
DIGEST_SIZE = 8


class CheckpointError(ValueError):
    """Unreadable, truncated, corrupt or wrong-version checkpoint."""


@dataclass
class Checkpoint:
    config: dict  # RunConfig.to_dict() plus "vocab"
    tensors: list[tuple[str, np.ndarray]]
    optim: OptimState
    rng_words: list[int]
    iteration: int
    metrics: list[dict] = field(default_factory=list)

    def tensor(self, name: str) -> np.ndarray:
        for key, arr in self.tensors:
            if key == name:
                return arr
        raise KeyError(name)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def _digest(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=DIGEST_SIZE).digest()


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise CheckpointError(f"only rank-2 tensors are stored, got shape {arr.shape}")
    return struct.pack("<II", *arr.shape) + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = _canonical(ckpt.config)
    parts += [struct.pack("<Q", len(cfg)), cfg]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors:
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, _pack_array(arr)]
    opt = ckpt.optim
    if len(opt.m) != len(ckpt.tensors) or len(opt.v) != len(ckpt.tensors):
        raise CheckpointError("optimizer buffers do not match the tensor list")
    parts.append(struct.pack("<Qddd", opt.step, opt.beta1, opt.beta2, opt.eps))
    parts += [_pack_array(b) for b in opt.m]
    parts += [_pack_array(b) for b in opt.v]
    parts.append(struct.pack(f"<I{len(ckpt.rng_words)}Q", len(ckpt.rng_words), *ckpt.rng_words))
    parts.append(struct.pack("<Q", ckpt.iteration))
    met = _canonical(ckpt.metrics)
    parts += [struct.pack("<Q", len(met)), met]
    body = b"".join(parts)
    return body + _digest(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        rows, cols = self.unpack("<II")
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise CheckpointError("checkpoint is truncated")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.pos = 8
    try:
        (n,) = r.unpack("<Q")
        config = json.loads(r.take(n))
        (count,) = r.unpack("<I")
        tensors = []
        for _ in range(count):
            (ln,) = r.unpack("<I")
            name = r.take(ln).decode()
            tensors.append((name, r.array()))
        step, b1, b2, eps = r.unpack("<Qddd")
        m = [r.array() for _ in range(count)]
        v = [r.array() for _ in range(count)]
        (nw,) = r.unpack("<I")
        words = list(r.unpack(f"<{nw}Q"))
        (iteration,) = r.unpack("<Q")
        (n,) = r.unpack("<Q")
        metrics = json.loads(r.take(n))
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint: {err}") from None
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config, tensors, OptimState(m, v, step, b1, b2, eps), words, iteration, metrics)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    return from_bytes(blob)
