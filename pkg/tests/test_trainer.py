import math

import numpy as np
import pytest

from ot_transformer.checkpoint import (CheckpointError, from_bytes, load_checkpoint, save_checkpoint,
                                       to_bytes)
from ot_transformer.config import ConfigError, RunConfig, load_config
from ot_transformer.data import synth_regression
from ot_transformer.rng import RngState
from ot_transformer.trainer import (evaluate, fit_linear, mean_nll, prepare_corpus, restore, tiled_windows,
                                    train)
from ot_transformer.transformer import init_model

TEXT = ("the quick brown fox jumps over the lazy dog; " * 5)[:200]


@pytest.fixture(scope="module")
def tiny_corpus():
    return prepare_corpus(text=TEXT * 4, test_fraction=0.2)


def tiny(**kw):
    base = RunConfig().replace(**{"model.d": 16, "model.H": 2, "model.n_ctx": 16, "model.M": 2, "batch_size": 4,
                                  "iters": 20, "eval_interval": 5, "eval_windows": 2})
    return base.replace(**kw)


def test_zero_iterations_returns_initial_model(tiny_corpus):
    cfg = tiny(iters=0)
    res = train(cfg, tiny_corpus, final_eval=False)
    init = init_model(res.model.cfg, cfg.seed)
    assert res.history == [] and res.checkpoint.iteration == 0
    assert all(np.array_equal(a.data, b.data) for a, b in zip(res.model.parameters(), init.parameters()))


def test_history_rows(tiny_corpus):
    res = train(tiny(iters=12), tiny_corpus)
    assert [r.iteration for r in res.history] == [5, 10, 12]
    for r in res.history:
        assert r.perplexity == math.exp(r.test_loss)
        assert r.wall_ms is None and math.isfinite(r.transport_cost)
    assert res.final_test_loss == evaluate(res.model, tiny_corpus.split.test, "ot")


def test_timing_column_is_optional(tiny_corpus):
    res = train(tiny(iters=5, record_timing=True), tiny_corpus, final_eval=False)
    assert res.history[0].wall_ms > 0


def test_memorizes_a_short_string():
    corpus = prepare_corpus(text=TEXT, test_fraction=0.1)
    cfg = RunConfig().replace(**{"model.d": 32, "model.H": 2, "model.n_ctx": 16, "model.M": 2, "model.lam": 0.0,
                                 "batch_size": 16, "iters": 400, "lr_max": 1e-2, "lr_min": 1e-4,
                                 "eval_interval": 400, "eval_windows": 1})
    res = train(cfg, corpus, final_eval=False)
    ids = corpus.split.train
    offs = np.arange(len(ids) - 16)[:, None] + np.arange(16)
    assert mean_nll(res.model, ids[offs], ids[offs + 1], "ot") < 0.1


def test_split_run_resumes_bit_exactly(tiny_corpus, tmp_path):
    cfg = tiny(checkpoint_interval=10)
    seen = []
    full = train(cfg, tiny_corpus, callbacks=[lambda k, p: seen.append(p) if k == "checkpoint" else None],
                 final_eval=False)
    assert [c.iteration for c in seen] == [10, 20]
    path = tmp_path / "mid.ottc"
    save_checkpoint(path, seen[0])
    resumed = train(cfg, tiny_corpus, resume_from=load_checkpoint(path), final_eval=False)
    assert to_bytes(resumed.checkpoint) == to_bytes(full.checkpoint)
    assert resumed.history == full.history


def test_resume_rejects_other_config(tiny_corpus):
    half = train(tiny(), tiny_corpus, stop_after=10, final_eval=False)
    with pytest.raises(CheckpointError):
        train(tiny(lr_max=5e-3), tiny_corpus, resume_from=half.checkpoint)
    longer = train(tiny(iters=30), tiny_corpus, resume_from=half.checkpoint, final_eval=False)
    assert longer.checkpoint.iteration == 30


def test_checkpoint_round_trip_and_corruption(tiny_corpus, tmp_path):
    res = train(tiny(iters=3), tiny_corpus, final_eval=False)
    blob = to_bytes(res.checkpoint)
    back = from_bytes(blob)
    assert to_bytes(back) == blob
    cfg, vocab, model = restore(back)
    assert vocab == tiny_corpus.vocab
    assert all(np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), res.model.parameters()))
    for bad in (blob[:-1], blob[:20], b"XXXX" + blob[4:], blob + b"\0",
                blob[:100] + bytes([blob[100] ^ 1]) + blob[101:]):
        with pytest.raises(CheckpointError):
            from_bytes(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ottc")


def test_divergence_is_recorded(tiny_corpus):
    cfg = tiny(**{"model.T": 1e4, "model.init_std": 1.0, "iters": 5})
    res = train(cfg, tiny_corpus)
    assert res.diverged and res.failure.kind == "divergence" and res.failure.iteration == 0
    assert res.final_test_loss is None


def test_modes_train(tiny_corpus):
    for mode in ("discrete", "node"):
        res = train(tiny(iters=3), tiny_corpus, mode=mode, final_eval=False)
        assert res.checkpoint.config["mode"] == mode and len(res.history) == 1


def test_tiled_windows():
    offs = tiled_windows(25, 8)
    assert offs.shape == (3, 8) and offs[-1, -1] == 23
    with pytest.raises(ConfigError):
        tiled_windows(8, 8)


def test_fit_linear_recovers_identity():
    data = synth_regression(64, 2, 2, 0.0, RngState(0), identity=True)
    X = np.stack([x.reshape(-1, order="F") for x in data.X0])
    W, mse = fit_linear(X, data.y)
    assert mse < 1e-6
    np.testing.assert_allclose(W, np.eye(4), atol=1e-3)


def test_config_loading(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"iters": 7, "model": {"d": 16}}')
    cfg = load_config(p)
    assert cfg.iters == 7 and cfg.model.d == 16 and cfg.model.k == 4
    p.write_text('{"iterz": 7}')
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text('{"model": {"T": -1}}')
    with pytest.raises(ConfigError):
        load_config(p)
    assert RunConfig().replace(out_dir="x").config_hash() == RunConfig().config_hash()
    assert RunConfig().replace(seed=1).config_hash() != RunConfig().config_hash()
