"""Run configuration: JSON loading, validation and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .flow import MODES
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mode: str = "ot"
    seed: int = 0
    iters: int = 2000
    batch_size: int = 8
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    output_weight_decay: float = 0.0
    eval_interval: int = 100
    eval_windows: int = 64
    test_fraction: float = 0.1
    corpus: str | None = None  # None: bundled corpus
    out_dir: str = "runs/default"
    checkpoint_interval: int = 0  # 0: only the final checkpoint
    record_timing: bool = False
    plots: bool = True

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iters < 0:
            raise ConfigError("iters must be >= 0")
        if self.batch_size < 1 or self.eval_windows < 1 or self.eval_interval < 1:
            raise ConfigError("batch_size, eval_windows and eval_interval must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        return self

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        model_raw = raw.pop("model", {}) or {}
        model_known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(model_raw) - model_known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        try:
            model = ModelConfig(**model_raw)
            cfg = cls(model=model, **raw)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        return cfg.validate()

    def replace(self, **overrides) -> "RunConfig":
        """Copy with top-level or ``model.<name>`` overrides."""
        raw = self.to_dict()
        for key, value in overrides.items():
            if key.startswith("model."):
                raw["model"][key[6:]] = value
            else:
                raw[key] = value
        return RunConfig.from_dict(raw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Digest of everything that determines results (output settings excluded)."""
        raw = self.to_dict()
        for key in ("out_dir", "plots", "checkpoint_interval"):
            raw.pop(key)
        blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw)
