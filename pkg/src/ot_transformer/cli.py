"""Command-line entry point: ``ott {train,eval,robust,theory,ablate,generate}``.

Exit codes: 0 success, 2 configuration / input error, 3 divergence,
4 theory-suite failure. ``OTT_THREADS`` caps BLAS threads (default 1, which
keeps reruns byte-identical).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from . import plotting, reports
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import CorpusError, CorruptionSpec
from .generate import generate
from .theory import SUITES, TheoryConfig, run_theory
from .trainer import Corpus, evaluate, prepare_corpus, restore, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_THEORY = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _run_config(args, **extra) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out_dir is not None:
        over["out_dir"] = args.out_dir
    for flag, key in (("mode", "mode"), ("iters", "iters"), ("corpus", "corpus"), ("lam", "model.lam"),
                      ("steps", "model.M"), ("T", "model.T"), ("checkpoint_interval", "checkpoint_interval")):
        val = getattr(args, flag, None)
        if val is not None and not isinstance(val, list):  # ablate's --steps is a grid
            over[key] = val
    if getattr(args, "no_plots", False):
        over["plots"] = False
    over.update(_parse_set(getattr(args, "set", None)))
    over.update(extra)
    return cfg.replace(**over) if over else cfg


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _corpus_for(cfg: RunConfig, override: str | None) -> Corpus:
    return prepare_corpus(override if override is not None else cfg.corpus, cfg.test_fraction)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _train_into(cfg: RunConfig, out: Path, resume=None, quiet=False):
    out.mkdir(parents=True, exist_ok=True)

    def on_event(kind, payload):
        if kind == "row" and not quiet:
            _log(f"[{cfg.mode}] it {payload.iteration:6d}  train {payload.train_loss:.4f}  "
                 f"test {payload.test_loss:.4f}  cost {payload.transport_cost:.4g}")
        elif kind == "checkpoint":
            save_checkpoint(out / "checkpoints" / f"iter_{payload.iteration:07d}.ottc", payload)
        elif kind == "failure":
            _log(f"[{cfg.mode}] diverged at update {payload.iteration}: {payload.detail}")

    result = train(cfg, callbacks=[on_event], resume_from=resume)
    run_cfg = RunConfig.from_dict({k: v for k, v in result.checkpoint.config.items() if k != "vocab"})
    digest = run_cfg.config_hash()
    reports.write_metrics(out / "metrics.csv", result.history, digest, timing=cfg.record_timing)
    save_checkpoint(out / "checkpoint.ottc", result.checkpoint)
    reports.write_json(out / "config.json", run_cfg.to_dict())
    if cfg.plots and result.history:
        plotting.plot_metrics(result.history, out / "metrics.png", title=f"mode={cfg.mode}")
    final = result.final_test_loss
    summary = {
        "command": "train",
        "version": __version__,
        "config_sha256": digest,
        "config": run_cfg.to_dict(),
        "parameters": result.model.num_parameters(),
        "iterations_completed": result.checkpoint.iteration,
        "final_test_loss": final,
        "final_perplexity": None if final is None else math.exp(final),
        "last_row": result.history[-1].to_dict() if result.history else None,
        "failure": result.failure.to_dict() if result.failure else None,
        "status": "diverged" if result.failure else "ok",
    }
    reports.write_json(out / "summary.json", summary)
    return result, summary


def cmd_train(args) -> int:
    cfg = _run_config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    _, summary = _train_into(cfg, Path(cfg.out_dir), resume)
    print(json.dumps({"out_dir": cfg.out_dir, "status": summary["status"],
                      "final_test_loss": summary["final_test_loss"]}))
    return EXIT_DIVERGED if summary["failure"] else EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg, vocab, model = restore(ckpt)
    corpus = _corpus_for(cfg, args.corpus)
    if corpus.vocab != vocab:
        raise CorpusError("corpus vocabulary differs from the checkpoint's")
    loss = evaluate(model, corpus.split.test, cfg.mode)
    out = Path(args.out_dir or cfg.out_dir)
    digest = reports.digest({"checkpoint": _file_sha(args.checkpoint), "corpus": args.corpus or cfg.corpus})
    reports.write_csv(out / "eval.csv", ["split", "tokens", "test_loss", "perplexity"],
                      [["test", len(corpus.split.test), loss, math.exp(loss)]], digest)
    print(json.dumps({"test_loss": loss, "perplexity": math.exp(loss)}))
    return EXIT_OK


def cmd_robust(args) -> int:
    paths = args.checkpoint
    labels = args.label or []
    if labels and len(labels) != len(paths):
        raise UsageError("give one --label per --checkpoint")
    if 0.0 not in args.rates:
        raise UsageError("the rate grid must include 0 (the reference loss)")
    tables = []
    corpus = None
    for i, path in enumerate(paths):
        cfg, vocab, model = restore(load_checkpoint(path))
        if corpus is None:
            corpus = _corpus_for(cfg, args.corpus)
        if corpus.vocab != vocab:
            raise CorpusError(f"{path}: vocabulary differs from the corpus")
        label = labels[i] if labels else Path(path).stem
        losses = []
        for rate in args.rates:
            spec = CorruptionSpec(rate, args.corruption_seed)
            losses.append(evaluate(model, corpus.split.test, cfg.mode, spec, len(vocab)))
            _log(f"[robust] {label} rate {rate:g}: loss {losses[-1]:.4f}")
        tables.append(reports.DropTable(label, list(args.rates), losses))
    out = Path(args.out_dir or "runs/robust")
    digest = reports.digest({"checkpoints": [_file_sha(p) for p in paths], "labels": labels,
                             "rates": args.rates, "corruption_seed": args.corruption_seed, "corpus": args.corpus})
    reports.write_drop_tables(out / "robust.csv", tables, digest)
    if not args.no_plots:
        plotting.plot_drops(tables, out / "robust.png")
    summary = {"command": "robust", "config_sha256": digest, "rates": args.rates,
               "tables": [{"label": t.label, "loss": t.losses, "drop": t.drops,
                           "drop_non_decreasing": t.non_decreasing()} for t in tables]}
    reports.write_json(out / "summary.json", summary)
    print(json.dumps(summary["tables"]))
    return EXIT_OK


def cmd_theory(args) -> int:
    tcfg = TheoryConfig(
        seed=args.seed if args.seed is not None else 0,
        T=args.T,
        lam_factor=args.lam_factor,
        lam=args.lam,
        n_pairs=args.pairs,
        n_measure_pairs=args.measure_pairs,
        suites=tuple(args.suites) if args.suites else SUITES,
    )
    try:
        tcfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    results = run_theory(tcfg)
    out = Path(args.out_dir or "runs/theory")
    raw = asdict(tcfg)
    digest = reports.digest(raw)
    reports.write_theory(out / "theory.csv", results, digest)
    if not args.no_plots:
        plotting.plot_theory(results, out / "theory.png")
    ok = all(r.passed for r in results)
    reports.write_json(out / "summary.json", {"command": "theory", "config_sha256": digest, "config": raw,
                                              "passed": ok, "results": [r.to_dict() for r in results]})
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.error}" if r.error else ""
        print(f"{status}  {r.suite:<14} {r.head:<10} cases={r.cases:<5d} violations={r.violations:<3d} "
              f"worst_slack={r.worst_slack:.3e}  C={r.constant:.6g}{extra}")
    return EXIT_OK if ok else EXIT_THEORY


def cmd_ablate(args) -> int:
    base = _run_config(args)
    out = Path(base.out_dir)
    cells = []
    for lam in args.lambdas:
        for steps in args.steps:
            cell_dir = out / "cells" / f"lam{lam:g}_M{steps}"
            cfg = base.replace(**{"model.lam": lam, "model.M": steps, "out_dir": str(cell_dir)})
            _log(f"[ablate] lambda={lam:g} M={steps}")
            result, summary = _train_into(cfg, cell_dir, quiet=not args.verbose)
            last = result.history[-1] if result.history else None
            cells.append(reports.AblationCell(
                lam, steps, summary["status"], result.final_test_loss,
                last.transport_cost if last else None,
                result.failure.iteration if result.failure else None,
            ))
    digest = reports.digest({"base": base.config_hash(), "lambdas": args.lambdas, "steps": args.steps})
    reports.write_ablation(out / "ablation.csv", cells, digest)
    if base.plots:
        plotting.plot_ablation(cells, out / "ablation.png")
    reports.write_json(out / "summary.json", {"command": "ablate", "config_sha256": digest,
                                              "base_config": base.to_dict(), "cells": [c.to_dict() for c in cells]})
    print(json.dumps([c.to_dict() for c in cells]))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg, vocab, model = restore(load_checkpoint(args.checkpoint))
    text = generate(model, vocab, args.prompt, args.length, args.temperature,
                    args.seed if args.seed is not None else 0, cfg.mode)
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "sample.txt").write_text(text)
    sys.stdout.write(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ott", description="Continuous-time transformer with transport-cost training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")

    def training_flags(sp):
        sp.add_argument("--mode", choices=["ot", "node", "discrete"])
        sp.add_argument("--iters", type=int)
        sp.add_argument("--lam", type=float, help="transport-cost weight lambda")
        sp.add_argument("--T", type=float, help="time horizon")
        sp.add_argument("--corpus", help="UTF-8 text file (default: bundled corpus)")
        sp.add_argument("--checkpoint-interval", type=int)
        sp.add_argument("--no-plots", action="store_true")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config field, e.g. model.d=32 (repeatable)")

    sp = sub.add_parser("train", help="train a model and write metrics.csv + checkpoint")
    common(sp)
    training_flags(sp)
    sp.add_argument("--steps", type=int, help="integration steps M")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="test loss and perplexity of a checkpoint on the full held-out split")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("robust", help="test-loss drop under input corruption")
    common(sp, config=False)
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--label", action="append")
    sp.add_argument("--rates", type=_floats, default=list(reports.DEFAULT_RATES))
    sp.add_argument("--corruption-seed", type=int, default=0)
    sp.add_argument("--corpus")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_robust)

    sp = sub.add_parser("theory", help="run the optimal-control certificate suites")
    common(sp, config=False)
    sp.add_argument("--lam", type=float, help="absolute lambda for every suite")
    sp.add_argument("--lam-factor", type=float, default=2.0, help="lambda = factor * T * L^2 (default 2)")
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--pairs", type=int, default=1000)
    sp.add_argument("--measure-pairs", type=int, default=200)
    sp.add_argument("--suites", nargs="+", choices=SUITES)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_theory)

    sp = sub.add_parser("ablate", help="train one model per (lambda, M) grid cell")
    common(sp)
    training_flags(sp)
    sp.add_argument("--lambdas", type=_floats, default=[0.0, 1.0])
    sp.add_argument("--steps", type=_ints, default=[8])
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("generate", help="sample text from a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--length", type=int, default=200)
    sp.add_argument("--temperature", type=float, default=0.0)
    sp.set_defaults(func=cmd_generate)
    return p


def _threads() -> int:
    raw = os.environ.get("OTT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"OTT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"OTT_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (ConfigError, CorpusError, CheckpointError, UsageError) as err:
        _log(f"error: {err}")
        return EXIT_CONFIG
    except ValueError as err:  # e.g. bad corruption rate, negative length
        _log(f"error: {err}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
