import json

import pytest

from ot_transformer import cli
from ot_transformer.reports import read_csv

TEXT = ("the quick brown fox jumps over the lazy dog; " * 40)
SMALL = ["--set", "model.d=16", "--set", "model.H=2", "--set", "model.n_ctx=16", "--set", "batch_size=4",
         "--set", "eval_windows=2", "--set", "eval_interval=5"]


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("corpus") / "text.txt"
    p.write_text(TEXT)
    return str(p)


@pytest.fixture(scope="module")
def trained(corpus_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--corpus", corpus_file, "--iters", "10", "--out-dir", str(out)] + SMALL) == 0
    return out


def _train(out, corpus_file, *extra):
    return cli.main(["train", "--corpus", corpus_file, "--no-plots", "--out-dir", str(out)] + SMALL + list(extra))


def test_train_outputs(trained):
    for name in ("metrics.csv", "checkpoint.ottc", "config.json", "summary.json", "metrics.png"):
        assert (trained / name).exists(), name
    header, rows, digest = read_csv(trained / "metrics.csv")
    assert header == ["iteration", "train_loss", "test_loss", "transport_cost", "perplexity"]
    assert [r[0] for r in rows] == ["5", "10"] and len(digest) == 64
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["config_sha256"] == digest
    assert (trained / "metrics.png").read_bytes()[:4] == b"\x89PNG"


def test_reruns_are_byte_identical(corpus_file, tmp_path):
    assert _train(tmp_path / "a", corpus_file, "--iters", "10") == 0
    assert _train(tmp_path / "b", corpus_file, "--iters", "10") == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_plots_are_deterministic(corpus_file, tmp_path):
    for d in ("a", "b"):
        assert cli.main(["train", "--corpus", corpus_file, "--iters", "5", "--out-dir", str(tmp_path / d)] + SMALL) == 0
    assert (tmp_path / "a" / "metrics.png").read_bytes() == (tmp_path / "b" / "metrics.png").read_bytes()


def test_single_step_ot_matches_discrete_rows(corpus_file, tmp_path):
    flags = ["--iters", "10", "--steps", "1", "--T", "1", "--lam", "0"]
    assert _train(tmp_path / "ot", corpus_file, "--mode", "ot", *flags) == 0
    assert _train(tmp_path / "disc", corpus_file, "--mode", "discrete", *flags) == 0
    _, ot_rows, ot_hash = read_csv(tmp_path / "ot" / "metrics.csv")
    _, disc_rows, disc_hash = read_csv(tmp_path / "disc" / "metrics.csv")
    strip = lambda rows: [r[:3] + r[4:] for r in rows]  # transport cost is diagnostic-only in discrete mode
    assert strip(ot_rows) == strip(disc_rows)
    assert ot_hash != disc_hash


def test_resume_matches_uninterrupted(corpus_file, tmp_path):
    assert _train(tmp_path / "full", corpus_file, "--iters", "10", "--checkpoint-interval", "5") == 0
    mid = tmp_path / "full" / "checkpoints" / "iter_0000005.ottc"
    assert mid.exists()
    assert _train(tmp_path / "res", corpus_file, "--iters", "10", "--resume", str(mid)) == 0
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "res" / "metrics.csv").read_bytes()


def test_eval_and_robust(trained, corpus_file, tmp_path, capsys):
    ck = str(trained / "checkpoint.ottc")
    assert cli.main(["eval", "--checkpoint", ck, "--corpus", corpus_file, "--out-dir", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["perplexity"] > 1
    assert cli.main(["robust", "--checkpoint", ck, "--label", "m", "--corpus", corpus_file,
                     "--rates", "0,0.05,0.5", "--out-dir", str(tmp_path)]) == 0
    header, rows, _ = read_csv(tmp_path / "robust.csv")
    assert header == ["model", "metric", "0.0", "0.05", "0.5"] and rows[1][:3] == ["m", "drop", "0.0"]
    assert (tmp_path / "robust.png").exists()
    assert cli.main(["robust", "--checkpoint", ck, "--rates", "0.1", "--corpus", corpus_file]) == 2


def test_theory_exit_codes(tmp_path):
    base = ["theory", "--pairs", "20", "--measure-pairs", "5", "--no-plots"]
    assert cli.main(base + ["--out-dir", str(tmp_path / "ok")]) == 0
    header, rows, _ = read_csv(tmp_path / "ok" / "theory.csv")
    assert header[0] == "suite" and all(r[8] == "true" for r in rows)
    assert cli.main(base + ["--lam", "0.01", "--suites", "stability_mse", "--out-dir", str(tmp_path / "bad")]) == 4


def test_ablate_grid(corpus_file, tmp_path):
    code = cli.main(["ablate", "--corpus", corpus_file, "--iters", "5", "--lambdas", "0,1", "--steps", "1,2",
                     "--out-dir", str(tmp_path)] + SMALL)
    assert code == 0
    _, rows, _ = read_csv(tmp_path / "ablation.csv")
    assert [(r[0], r[1]) for r in rows] == [("0.0", "1"), ("0.0", "2"), ("1.0", "1"), ("1.0", "2")]
    assert (tmp_path / "cells" / "lam1_M2" / "metrics.csv").exists()
    assert (tmp_path / "ablation.png").exists()


def test_divergence_exit_code(corpus_file, tmp_path):
    assert _train(tmp_path, corpus_file, "--iters", "3", "--T", "10000", "--set", "model.init_std=1.0") == 3
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "diverged"


def test_generate(trained, capsys):
    ck = str(trained / "checkpoint.ottc")
    assert cli.main(["generate", "--checkpoint", ck, "--prompt", "the ", "--length", "20"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["generate", "--checkpoint", ck, "--prompt", "the ", "--length", "20"]) == 0
    assert capsys.readouterr().out == first and len(first.strip()) == 24
    assert cli.main(["generate", "--checkpoint", ck, "--prompt", "fox", "--length", "0"]) == 0
    assert capsys.readouterr().out == "fox\n"
    assert cli.main(["generate", "--checkpoint", ck, "--prompt", "the", "--length", "10", "--temperature", "1.5",
                     "--seed", "3"]) == 0
    assert len(capsys.readouterr().out.strip()) == 13


def test_input_errors(trained, corpus_file, tmp_path):
    ck = trained / "checkpoint.ottc"
    assert cli.main(["generate", "--checkpoint", str(ck), "--prompt", "XYZ", "--length", "3"]) == 2
    assert _train(tmp_path, corpus_file, "--set", "bogus=1") == 2
    bad = tmp_path / "trunc.ottc"
    bad.write_bytes(ck.read_bytes()[:50])
    assert cli.main(["eval", "--checkpoint", str(bad)]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text("[1, 2]")
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_thread_setting(monkeypatch, corpus_file, tmp_path):
    monkeypatch.setenv("OTT_THREADS", "zero")
    assert _train(tmp_path, corpus_file, "--iters", "1") == 2
