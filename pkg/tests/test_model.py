import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopdyn import dynamics as D
from loopdyn import model as M
from loopdyn.errors import DivergedForwardError, InvalidInputError, VocabularyError

from conftest import small_config

SCHEMES = list(M.NormScheme)


def test_config_invariants():
    with pytest.raises(InvalidInputError):
        M.ModelConfig(d_model=64, n_heads=4, d_head=8)
    with pytest.raises(InvalidInputError):
        small_config(recurrent_layers=0)
    cfg = small_config()
    assert cfg.mlp_hidden == 4 * cfg.d_model
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_deterministic_and_structural():
    a = M.init_random(small_config(seed=7))
    b = M.init_random(small_config(seed=7))
    assert a.checksum() == b.checksum()
    assert a.w_inject is None
    assert M.init_random(small_config(seed=8)).checksum() != a.checksum()
    inj = M.init_random(small_config(input_injection=True))
    assert inj.w_inject.shape == (64, 32)


def test_default_geometry():
    w = M.init_random(M.ModelConfig(recurrent_layers=1))
    lw = w.layers[0]
    assert lw.wq.shape == (512, 512)
    assert lw.head_block("wq", 3, 128).shape == (512, 128)
    assert np.all(lw.n1 == 1.0)
    assert abs(lw.wq.std() - 0.02) < 1e-3


@pytest.mark.parametrize("scheme", SCHEMES)
def test_block_shape(scheme):
    cfg = small_config(norm_scheme=scheme)
    w = M.init_random(cfg)
    x = np.random.default_rng(0).normal(size=(6, 32))
    y, a = M.block_forward(x, 0, w)
    assert y.shape == x.shape and a.shape == (4, 6, 6)


def test_zero_branches_give_identity_prenorm():
    cfg = small_config()
    w = M.init_random(cfg)
    lw = w.layers[0]
    w.layers[0] = dataclasses.replace(lw, wv=np.zeros_like(lw.wv), mlp_out=np.zeros_like(lw.mlp_out))
    x = np.random.default_rng(0).normal(size=(5, 32))
    y, _ = M.block_forward(x, 0, w)
    assert np.array_equal(y, x)


def test_single_token_attention_is_one():
    w = M.init_random(small_config())
    _, a = M.block_forward(np.ones((1, 32)), 1, w)
    assert np.array_equal(a, np.ones((4, 1, 1)))


def test_block_equations_by_hand():
    cfg = small_config(positional="None")
    w = M.init_random(cfg)
    lw = w.layers[0]
    x = np.random.default_rng(4).normal(size=(5, 32))

    def n(v):
        return v / np.sqrt(np.mean(v * v, axis=1, keepdims=True))

    def attn(v):
        out = np.zeros_like(v)
        for h in range(4):
            sl = slice(8 * h, 8 * h + 8)
            q, k, vv = v @ lw.wq[:, sl], v @ lw.wk[:, sl], v @ lw.wv[:, sl]
            s = q @ k.T / np.sqrt(8)
            s[np.triu_indices(5, 1)] = -np.inf
            p = np.exp(s - s.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            out[:, sl] = p @ vv
        return out @ lw.wo

    def mlp(v):
        h = v @ lw.mlp_in
        return 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3))) @ lw.mlp_out

    hat = x + attn(n(x))
    expect = {
        M.NormScheme.PRE_NORM: hat + mlp(n(hat)),
    }
    h2 = n(x + attn(n(x)))
    expect[M.NormScheme.HUGINN_SANDWICH] = n(h2 + mlp(n(h2)))
    h3 = x + n(attn(n(x)))
    expect[M.NormScheme.OURO_SANDWICH] = h3 + n(mlp(n(h3)))
    for scheme, ref in expect.items():
        y, _ = M.block_forward(x, 0, w, dataclasses.replace(cfg, norm_scheme=scheme))
        assert np.allclose(y, ref, atol=1e-12), scheme


def test_rotary_is_relative():
    cfg = small_config()
    lw = M.init_random(cfg).layers[0]
    x = np.random.default_rng(2).normal(size=(3, 32))
    s1 = M.attention_scores(x, lw, cfg)
    # shifting both tokens by the same offset leaves scores unchanged
    x2 = np.vstack([np.random.default_rng(9).normal(size=(2, 32)), x])
    s2 = M.attention_scores(x2, lw, cfg)[:, 2:, 2:]
    assert np.allclose(s1, s2, atol=1e-12)


def test_single_loop_equals_feedforward_stack():
    cfg = small_config()
    w = M.init_random(cfg)
    x = np.random.default_rng(1).normal(size=(4, 32))
    tr = M.run_recurrent(x, w, 1)
    y = x
    for i in range(3):
        y, _ = M.block_forward(y, i, w)
    assert np.array_equal(tr.output, y)


def test_injection_applied_once_per_recurrence():
    w = M.init_random(small_config(input_injection=True))
    tr = M.run_recurrent(np.ones((3, 32)), w, 2)
    assert tr.injection_count == 2
    assert tr.injected.shape == (2, 3, 32)


def test_injection_formula():
    cfg = small_config(input_injection=True, prelude_layers=1, coda_layers=1, recurrent_layers=2)
    w = M.init_random(cfg)
    x = np.random.default_rng(3).normal(size=(4, 32))
    tr = M.run_recurrent(x, w, 3)
    xp, _ = M.block_forward(x, 0, w)
    z = M.initial_state(4, cfg)
    for _ in range(3):
        u = np.concatenate([xp, z], axis=1) @ w.w_inject
        for j in (1, 2):
            u, _ = M.block_forward(u, j, w)
        z = u
    out, _ = M.block_forward(z, 3, w)
    assert np.array_equal(tr.output, out)
    assert tr.realized_residuals().shape[0] == 1 + 3 * 2 + 1
    assert tr.realized_index()[0] == (0, 0) and tr.realized_index()[-1] == (2, 3)


def test_ouro_loop_norm_applied():
    w = M.init_random(small_config(norm_scheme="OuroSandwich"))
    tr = M.run_recurrent(np.random.default_rng(0).normal(size=(3, 32)) * 5, w, 2)
    assert np.allclose(np.sqrt(np.mean(tr.carried**2, axis=-1)), 1.0, atol=1e-9)
    assert not np.allclose(np.sqrt(np.mean(tr.recurrent[:, -1] ** 2, axis=-1)), 1.0)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(SCHEMES), st.booleans(), st.integers(1, 6), st.integers(0, 2**32))
def test_trace_invariants(scheme, inj, t, seed):
    cfg = small_config(norm_scheme=scheme, input_injection=inj, seed=seed, prelude_layers=1, coda_layers=1)
    w = M.init_random(cfg)
    tr = M.run_recurrent(M.random_embeddings(t, 32, seed), w, 3)
    a = tr.realized_attentions()
    assert np.max(np.abs(a.sum(-1) - 1)) <= 1e-9
    iu = np.triu_indices(t, 1)
    assert np.all(a[..., iu[0], iu[1]] == 0.0)
    assert tr.realized_residuals().shape[0] == 1 + 3 * 3 + 1
    assert tr.embedding.shape == (t, 32)


def test_determinism_bit_exact():
    cfg = small_config(input_injection=True)
    x = M.random_embeddings(5, 32, 0)
    a = M.run_recurrent(x, M.init_random(cfg), 4)
    b = M.run_recurrent(x, M.init_random(cfg), 4)
    assert np.array_equal(a.recurrent, b.recurrent) and np.array_equal(a.attentions, b.attentions)


def test_trace_holds_no_weight_copies():
    cfg = small_config(input_injection=True)
    w = M.init_random(cfg)
    tr = M.run_recurrent(np.ones((4, 32)), w, 3)
    weight_shapes = {t.shape for t in w.named_tensors().values()}
    for f in dataclasses.fields(tr):
        v = getattr(tr, f.name)
        if isinstance(v, np.ndarray):
            assert v.shape[-2:] not in weight_shapes or v.shape[-1] != 32 * 4, f.name
    assert not any(isinstance(getattr(tr, f.name), (M.ModelWeights, M.LayerWeights)) for f in dataclasses.fields(tr))
    assert tr.weights_checksum == w.checksum()


def test_same_layer_objects_serve_every_recurrence(monkeypatch):
    w = M.init_random(small_config())
    seen = []
    orig = M._block

    def spy(x, lw, config):
        seen.append(id(lw))
        return orig(x, lw, config)

    monkeypatch.setattr(M, "_block", spy)
    M.run_recurrent(np.ones((2, 32)), w, 4)
    assert seen == [id(lw) for lw in w.recurrent] * 4


def test_divergence_reports_location():
    cfg = small_config()
    w = M.init_random(cfg)
    lw = w.layers[1]
    w.layers[1] = dataclasses.replace(lw, wv=np.full_like(lw.wv, np.nan))
    with pytest.raises(DivergedForwardError) as exc:
        M.run_recurrent(np.ones((2, 32)), w, 3)
    assert exc.value.layer == 1 and exc.value.recurrence == 0


def test_ablate_mlp():
    w = M.init_random(small_config(recurrent_layers=12))
    ab = M.ablate_mlp(w, 2)
    assert np.all(ab.layers[2].mlp_out == 0)
    for i in range(12):
        if i != 2:
            assert ab.layers[i].checksum() == w.layers[i].checksum()
    assert M.ablate_mlp(ab, 2).checksum() == ab.checksum()
    assert w.layers[2].mlp_out.any()
    with pytest.raises(IndexError):
        M.ablate_mlp(w, 12)


def test_ablated_block_is_attention_only():
    cfg = small_config()
    w = M.ablate_mlp(M.init_random(cfg), 0)
    x = np.random.default_rng(0).normal(size=(4, 32))
    y, _ = M.block_forward(x, 0, w)
    a, _ = M.attention(M._norm(x, w.layers[0].n1, cfg.norm_kind), w.layers[0], cfg)
    assert np.array_equal(y, x + a)


def test_embed_tokens():
    table = np.random.default_rng(0).normal(size=(10, 4))
    assert M.embed_tokens([], table).shape == (0, 4)
    e = M.embed_tokens([3, 3], table)
    assert np.array_equal(e[0], e[1])
    assert np.array_equal(M.embed_tokens([5], table)[0], table[5])
    with pytest.raises(VocabularyError):
        M.embed_tokens([10], table)


@pytest.mark.slow
def test_prenorm_injection_differences_decrease():
    # 128 recurrences of the default 12-layer model, seed 0
    cfg = M.ModelConfig(input_injection=True, seed=0)
    tr = M.run_recurrent(M.random_embeddings(32, 512, 0), M.init_random(cfg), 128, M.CaptureFlags(attentions=False))
    s = D.successive_differences(tr)
    for layer in range(12):
        v = s.values[s.index[:, 1] == layer]
        tail = v[16:]
        # monotone up to round-off once the state is within float precision
        floor = 1e-12 * np.linalg.norm(tr.recurrent[-1, layer])
        assert np.all((np.diff(tail) <= 0) | (tail[1:] <= floor)), layer
