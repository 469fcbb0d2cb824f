import numpy as np
import pytest

from ot_transformer import tensor as tc
from ot_transformer.oracle import autodiff_loss_grad
from ot_transformer.tensor import Tensor
from ot_transformer.transformer import (ModelConfig, TerminalLossSpec, analytic_loss_grad, block_forward, embed,
                                        init_model, mhsa, operator_norm, output_head, stack_forward)


def _cfg(**kw):
    base = dict(d=8, H=2, D=2, n_ctx=6, vocab_size=5, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def _softmax(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _reference_attention(X, block, causal):
    """Per-head loop: sum_h W V X softmax(K X^T Q x_j / sqrt(k))."""
    n = X.shape[1]
    out = np.zeros_like(X)
    for hp in block.heads:
        k = hp.Q.shape[0]
        S = (hp.K @ X).T @ (hp.Q @ X) / np.sqrt(k)
        if causal:
            S = np.where(np.triu(np.ones((n, n), dtype=bool)), S, -np.inf)
        out += hp.W @ hp.V @ X @ _softmax(S)
    return out


@pytest.mark.parametrize("causal", [False, True])
def test_fused_attention_matches_per_head_loop(causal):
    model = init_model(_cfg(), 0)
    block = model.stack.blocks[0]
    X = np.random.default_rng(0).standard_normal((8, 6))
    got = mhsa(Tensor(X), block, causal, ln_placement="pre").data
    b = block
    U = _ln(X, b.ln1_gain.data, b.ln1_bias.data)
    np.testing.assert_allclose(got, X + _reference_attention(U, block, causal), atol=1e-12)


def test_post_ln_wiring():
    model = init_model(_cfg(), 1)
    b = model.stack.blocks[0]
    X = np.random.default_rng(1).standard_normal((8, 4))
    got = block_forward(Tensor(X), b, True, ln_placement="post").data
    U = _ln(X + _reference_attention(X, b, True), b.ln1_gain.data, b.ln1_bias.data)
    hidden = tc.gelu(Tensor(b.mlp_w1.data @ U + b.mlp_b1.data)).data
    want = _ln(U + b.mlp_w2.data @ hidden + b.mlp_b2.data, b.ln2_gain.data, b.ln2_bias.data)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_single_token_attention_is_linear():
    model = init_model(_cfg(), 2)
    b = model.stack.blocks[0]
    x = np.random.default_rng(2).standard_normal((8, 1))
    u = _ln(x, b.ln1_gain.data, b.ln1_bias.data)
    want = x + sum(hp.W @ hp.V @ u for hp in b.heads)
    np.testing.assert_allclose(mhsa(Tensor(x), b).data, want, atol=1e-13)


def test_mlp_skip_flag():
    model = init_model(_cfg(), 3)
    b = model.stack.blocks[0]
    X = Tensor(np.random.default_rng(3).standard_normal((8, 3)))
    with_skip = block_forward(X, b, mlp_skip=True).data
    without = block_forward(X, b, mlp_skip=False).data
    U = mhsa(X, b).data
    np.testing.assert_allclose(with_skip - without, U, atol=1e-12)


def test_init_statistics():
    cfg = ModelConfig(d=64, H=4, D=2, n_ctx=16, vocab_size=50)
    model = init_model(cfg, 0)
    b = model.stack.blocks[0]
    assert not b.mlp_b1.data.any() and not b.mlp_b2.data.any() and not b.ln1_bias.data.any()
    assert np.all(b.ln1_gain.data == 1.0)
    assert b.wq.data.std() == pytest.approx(0.02, rel=0.05)
    assert b.wo.data.std() == pytest.approx(0.02 / 2.0, rel=0.1)
    assert b.mlp_w2.data.std() == pytest.approx(0.02 / 2.0, rel=0.1)


def test_init_is_seeded():
    a, b = init_model(_cfg(), 7), init_model(_cfg(), 7)
    c = init_model(_cfg(), 8)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0].data, c.parameters()[0].data)


def test_embedding_columns():
    model = init_model(_cfg(), 0)
    ids = np.array([[1, 4, 0], [2, 2, 3]])
    X = embed(ids, model.embedding).data
    E, P = model.embedding.token_table.data, model.embedding.pos_table.data
    np.testing.assert_allclose(X[:, 4], E[:, 2] + P[:, 1])
    with pytest.raises(ValueError):
        embed([5], model.embedding)
    with pytest.raises(ValueError):
        embed(np.zeros(7, dtype=int), model.embedding)


def test_time_conditioning_needs_t():
    cfg = _cfg(time_conditioning="append-scalar")
    model = init_model(cfg, 0)
    X = Tensor(np.zeros((8, 2)))
    with pytest.raises(ValueError):
        stack_forward(X, model.stack, cfg)
    a = stack_forward(X, model.stack, cfg, 0.0).data
    b = stack_forward(X, model.stack, cfg, 0.5).data
    assert not np.array_equal(a, b)


def test_pooled_head_shape():
    cfg = _cfg(head_kind="pooled", n_outputs=3, n_ctx=4)
    model = init_model(cfg, 0)
    X = Tensor(np.random.default_rng(0).standard_normal((8, 8)))
    assert output_head(X, model.output, seq_len=4).shape == (3, 2)
    with pytest.raises(tc.ShapeError):
        output_head(Tensor(np.zeros((8, 3))), model.output, seq_len=3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(T=0.0)
    with pytest.raises(ValueError):
        ModelConfig(lam=-1.0)
    with pytest.raises(ValueError):
        ModelConfig(ln_placement="middle")
    assert ModelConfig(T=2.0, M=8).dt == 0.25


def test_operator_norm_matches_svd():
    psi = np.random.default_rng(5).standard_normal((4, 7))
    assert operator_norm(psi) == pytest.approx(np.linalg.svd(psi, compute_uv=False)[0], rel=1e-10)
    assert operator_norm(np.zeros((2, 2))) == 0.0


@pytest.mark.parametrize("kind", ["mse", "softmax_ce"])
@pytest.mark.parametrize("per_token", [False, True])
def test_closed_form_loss_gradients(kind, per_token):
    rng = np.random.default_rng(6)
    X = rng.standard_normal((3, 2))
    c = 4
    psi = rng.standard_normal((c, 3 if per_token else 6))
    spec = TerminalLossSpec(kind, psi, per_token=per_token)
    cols = 2 if per_token else 1
    y = rng.standard_normal((c, cols)) if kind == "mse" else rng.dirichlet(np.ones(c), cols).T
    np.testing.assert_allclose(analytic_loss_grad(spec, X, y), autodiff_loss_grad(spec, X, y), atol=1e-12)
