"""Delimited report writers and the robustness / ablation tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .trainer import MetricsRow

METRIC_FIELDS = ("iteration", "train_loss", "test_loss", "transport_cost", "perplexity")
DEFAULT_RATES = (0.0, 0.005, 0.01, 0.05, 0.1)


def fmt(x) -> str:
    """Round-trip text for a cell: repr for floats, '' for None."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], config_hash: str) -> Path:
    """Header row, data rows, then ``# config_sha256=<hash>``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    buf.write(f"# config_sha256={config_hash}\n")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]], str | None]:
    """Inverse of :func:`write_csv`: (header, rows, config hash)."""
    lines = Path(path).read_text().splitlines()
    digest_line = None
    if lines and lines[-1].startswith("# config_sha256="):
        digest_line = lines.pop().split("=", 1)[1]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:], digest_line


def write_metrics(path, history: Sequence[MetricsRow], config_hash: str, timing: bool = False) -> Path:
    header = list(METRIC_FIELDS) + (["wall_ms"] if timing else [])
    rows = []
    for r in history:
        row = [r.iteration, r.train_loss, r.test_loss, r.transport_cost, r.perplexity]
        if timing:
            row.append(r.wall_ms)
        rows.append(row)
    return write_csv(path, header, rows, config_hash)


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(x):
    if hasattr(x, "to_dict"):
        return x.to_dict()
    if hasattr(x, "item"):
        return x.item()
    if isinstance(x, (tuple, set)):
        return list(x)
    return str(x)


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------


@dataclass
class DropTable:
    label: str
    rates: list[float]
    losses: list[float]

    @property
    def drops(self) -> list[float]:
        base = self.losses[self.rates.index(0.0)] if 0.0 in self.rates else self.losses[0]
        return [loss - base for loss in self.losses]

    def non_decreasing(self) -> bool:
        order = sorted(range(len(self.rates)), key=self.rates.__getitem__)
        d = [self.drops[i] for i in order]
        return all(b >= a for a, b in zip(d, d[1:]))


def write_drop_tables(path, tables: Sequence[DropTable], config_hash: str) -> Path:
    """Wide layout: one column per replace rate, a loss row and a drop row per model."""
    rates = tables[0].rates
    header = ["model", "metric"] + [fmt(float(r)) for r in rates]
    rows = []
    for t in tables:
        if t.rates != rates:
            raise ValueError("all drop tables must share the same rate grid")
        rows.append([t.label, "loss"] + list(t.losses))
        rows.append([t.label, "drop"] + t.drops)
    return write_csv(path, header, rows, config_hash)


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationCell:
    lam: float
    steps: int
    status: str  # "ok" or "diverged"
    final_test_loss: float | None
    final_transport_cost: float | None
    failure_iteration: int | None = None

    @property
    def perplexity(self) -> float | None:
        return None if self.final_test_loss is None else math.exp(self.final_test_loss)

    def to_dict(self) -> dict:
        return {**self.__dict__, "perplexity": self.perplexity}


ABLATION_FIELDS = ("lambda", "steps", "status", "final_test_loss", "perplexity", "final_transport_cost",
                   "failure_iteration")


def write_ablation(path, cells: Sequence[AblationCell], config_hash: str) -> Path:
    rows = [[float(c.lam), c.steps, c.status, c.final_test_loss, c.perplexity, c.final_transport_cost,
             c.failure_iteration] for c in cells]
    return write_csv(path, ABLATION_FIELDS, rows, config_hash)


THEORY_FIELDS = ("suite", "head", "cases", "violations", "worst_slack", "lambda", "L", "certified_constant",
                 "passed", "error")


def write_theory(path, results, config_hash: str) -> Path:
    rows = [[r.suite, r.head, r.cases, r.violations, float(r.worst_slack), float(r.lam), float(r.L),
             float(r.constant), r.passed, r.error] for r in results]
    return write_csv(path, THEORY_FIELDS, rows, config_hash)
