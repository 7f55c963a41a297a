import numpy as np
import pytest

from jbot import tensor as T
from jbot.checkpoint import CheckpointError, check_compatible, load_params, save_params
from jbot.jetdata import VALID, SyntheticSpec, generate_synthetic
from jbot.network import (
    NetworkConfig, as_tensors, cls_embeddings, encode, extract_cls_attention, fit_feature_scale,
    forward, init_params, param_group, project, resolve_feature_scale, tokenize,
)
from jbot.optim import AdamW
from jbot.rng import stream

CFG = NetworkConfig.preset("small", dropout=0.0)


def _params(cfg=CFG, seed=0, dtype=np.float64):
    return init_params(cfg, stream(seed, "init"), dtype=dtype)


def _jets(n=4, seed=0):
    return generate_synthetic(SyntheticSpec(), n, seed).features


# ---------------------------------------------------------------------------
# config


def test_presets():
    small, base = NetworkConfig.preset("small"), NetworkConfig.preset("base")
    assert (small.d_model, small.n_blocks, small.n_heads, small.d_proj, small.d_ff) == (32, 2, 4, 16, 128)
    assert (base.d_model, base.n_blocks, base.n_heads, base.d_proj) == (64, 4, 6, 32)
    # 64 / 6 is not integral: heads of width 10 projected back to 64
    assert base.head_dim == 10
    p = init_params(base, stream(0, "init"))
    assert p["blocks.0.attn.qkv.w"].shape == (64, 180)
    assert p["blocks.0.attn.out.w"].shape == (60, 64)
    assert small.proj_hidden == (128, 16) and small.clf_hidden == (64, 32)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(d_model=0)
    with pytest.raises(ValueError):
        NetworkConfig(feature_scale=(1.0, 1.0))
    with pytest.raises(ValueError):
        NetworkConfig(init="xavier")
    with pytest.raises(ValueError):
        NetworkConfig(input_spread=0.0)


def test_feature_scale_fit():
    x = _jets(200)
    s = fit_feature_scale(x)
    v = x[..., VALID] > 0.5
    assert s[0] == s[1] and s[3] == 1.0
    assert s[2] == pytest.approx(1.0 / x[..., 2][v].std())
    assert fit_feature_scale(x, 2.0)[2] == pytest.approx(2.0 * s[2])
    assert resolve_feature_scale(CFG, x).feature_scale == fit_feature_scale(x, CFG.input_spread)
    fixed = NetworkConfig(feature_scale=(1, 2, 3, 4))
    assert resolve_feature_scale(fixed, x) is fixed


# ---------------------------------------------------------------------------
# tokenizer


def test_tokenize_shape_and_cls_row():
    p = as_tensors(_params(), False)
    tokens, validity = tokenize(_jets(1)[0], None, p, CFG)
    assert tokens.shape == (31, 32)
    np.testing.assert_array_equal(tokens.data[0], p["cls_token"].data)
    assert validity[0]


def test_zero_mask_has_no_mask_token_rows():
    p = as_tensors(_params(), False)
    x = _jets(1)[0]
    a, _ = tokenize(x, np.zeros(30, bool), p, CFG)
    b, _ = tokenize(x, None, p, CFG)
    np.testing.assert_array_equal(a.data, b.data)
    assert not (a.data[1:] == p["mask_token"].data).all(axis=1).any()


def test_masked_row_ignores_underlying_features():
    p = as_tensors(_params(), False)
    x = _jets(1)[0]
    y = x.copy()
    y[1, :3] += (0.3, -0.2, 0.05)
    mask = np.zeros(30, bool)
    mask[1] = True
    a, _ = tokenize(x, mask, p, CFG)
    b, _ = tokenize(y, mask, p, CFG)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.data[2], p["mask_token"].data)


def test_mask_on_padded_slot_is_an_error():
    p = as_tensors(_params(), False)
    x = _jets(1)[0]
    mask = np.zeros(30, bool)
    mask[-1] = True
    with pytest.raises(ValueError, match="padded"):
        tokenize(x, mask, p, CFG)


# ---------------------------------------------------------------------------
# encoder


def _encode(x, p, cfg=CFG):
    return forward(x, None, as_tensors(p, False), cfg).data


def test_padded_slot_content_is_ignored():
    p = _params()
    x = _jets(2)
    y = x.copy()
    y[..., -1, :3] = 5.0  # junk in padding (valid flag stays 0)
    a, b = _encode(x, p), _encode(y, p)
    valid = np.concatenate([np.ones((2, 1), bool), x[..., VALID] > 0.5], axis=1)
    np.testing.assert_array_equal(a[valid], b[valid])


def test_permutation_equivariance():
    p = _params()
    x = _jets(1)[0]
    y = x.copy()
    y[[0, 3]] = y[[3, 0]]
    a, b = _encode(x[None], p)[0], _encode(y[None], p)[0]
    np.testing.assert_allclose(b[0], a[0], atol=1e-6)
    np.testing.assert_allclose(b[1], a[4], atol=1e-6)
    np.testing.assert_allclose(b[4], a[1], atol=1e-6)


def test_eval_forward_is_deterministic():
    p = _params(dtype=np.float32)
    cfg = NetworkConfig.preset("small")
    x = _jets(3)
    np.testing.assert_array_equal(_encode(x, p, cfg), _encode(x, p, cfg))


def test_train_mode_dropout_needs_rng_and_changes_output():
    cfg = NetworkConfig.preset("small")
    p = as_tensors(_params(cfg), False)
    tokens, validity = tokenize(_jets(2), None, p, cfg)
    with pytest.raises(ValueError):
        encode(tokens, validity, p, cfg, train=True)
    a = encode(tokens, validity, p, cfg, train=True, rng=np.random.default_rng(0)).data
    b = encode(tokens, validity, p, cfg, train=False).data
    assert not np.allclose(a, b)


def test_cls_depends_on_every_valid_particle():
    p = _params()
    x = _jets(1)[0]
    base = _encode(x[None], p)[0, 0]
    pt = as_tensors(p, False)
    for i in range(int(x[:, VALID].sum())):
        tokens, validity = tokenize(x, None, pt, CFG)
        t = tokens.data.copy()
        t[1 + i] = 0.0
        out = encode(T.Tensor(t, dtype=t.dtype), validity, pt, CFG).data[0]
        assert np.abs(out - base).max() > 0


# ---------------------------------------------------------------------------
# projection head


@pytest.mark.parametrize("normalized", [True, False])
def test_projection_is_rowwise(normalized):
    p = as_tensors(_params(), False)
    emb = forward(_jets(2), None, p, CFG)
    full = project(emb.reshape(-1, 32), p, normalized).data.reshape(2, 31, 16)
    cls = project(emb[:, 0], p, normalized).data
    np.testing.assert_allclose(full[:, 0], cls, rtol=1e-12)
    assert full.shape[-1] == CFG.d_model // 2


@pytest.mark.parametrize("normalized", [True, False])
def test_zero_weight_head_outputs_bias(normalized):
    arrays = _params()
    for k in arrays:
        if k.startswith("proj.") and k.endswith(".w"):
            arrays[k][:] = 0.0
    arrays["proj.2.b"][:] = np.arange(16)
    p = as_tensors(arrays, False)
    out = project(T.Tensor(np.random.default_rng(0).standard_normal((5, 32))), p, normalized).data
    np.testing.assert_allclose(out, np.tile(np.arange(16.0), (5, 1)))


def test_normalized_head_logits_are_bounded():
    p = as_tensors(_params(), False)
    out = project(T.Tensor(100 * np.random.default_rng(0).standard_normal((7, 32))), p, True).data
    assert np.abs(out).max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# attention extraction


def test_cls_attention_rows_sum_to_one():
    p = _params()
    x = _jets(1)[0]
    w = extract_cls_attention(x, p, CFG)
    assert w.shape == (4, 30)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    assert (w[:, x[:, VALID] < 0.5] == 0).all()


def test_single_particle_attention():
    x = np.zeros((30, 4))
    x[0] = (0.05, -0.02, 1.0, 1.0)
    w = extract_cls_attention(x, _params(), CFG)
    np.testing.assert_allclose(w[:, 0], 1.0)


def test_attention_responds_to_pt():
    p = _params()
    x = _jets(1)[0]
    y = x.copy()
    y[2, 2] *= 10
    assert np.abs(extract_cls_attention(x, p, CFG) - extract_cls_attention(y, p, CFG)).max() > 0


# ---------------------------------------------------------------------------
# gradients


def test_full_forward_gradient_check():
    cfg = NetworkConfig(d_model=8, n_blocks=2, n_heads=2, dropout=0.0, n_particles=3, feature_scale=(3, 3, 8, 1))
    arrays = init_params(cfg, stream(0, "init"), dtype=np.float64)
    names = sorted(arrays)
    x = np.zeros((2, 3, 4))
    x[0] = [(0.1, -0.2, 0.5, 1), (0.0, 0.1, 0.3, 1), (-0.2, 0.05, 0.2, 1)]
    x[1, :2] = [(0.2, 0.1, 0.7, 1), (-0.1, 0.0, 0.3, 1)]
    mask = np.zeros((2, 3), bool)
    mask[0, 1] = True
    probe = np.random.default_rng(1).standard_normal((2, 4, cfg.d_proj))

    def fn(*ts):
        p = dict(zip(names, ts))
        emb = forward(x, mask, p, cfg)
        out = project(emb.reshape(-1, cfg.d_model), p).reshape(2, 4, cfg.d_proj)
        return (out * T.Tensor(probe, dtype=out.dtype)).sum()

    errors = T.check_gradients(fn, [arrays[k] for k in names])
    worst = dict(zip(names, errors))
    assert max(errors) < 1e-4, {k: v for k, v in worst.items() if v >= 1e-4}
    groups = {param_group(k) for k in names}
    assert groups == {"tokenizer", "block.0", "block.1", "norm", "proj"}


# ---------------------------------------------------------------------------
# checkpoints and optimizer


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig.preset("small", feature_scale=(3.0, 3.0, 8.0, 1.0))
    arrays = init_params(cfg, stream(0, "init"))
    save_params(tmp_path, arrays, cfg, "teacher", step=12)
    back, cfg2, manifest = load_params(tmp_path)
    assert cfg2 == cfg and manifest["tag"] == "teacher" and manifest["step"] == 12
    assert manifest["final_norm"] is True
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_mismatch_names_both_shapes():
    a = init_params(NetworkConfig.preset("small"), stream(0, "init"))
    b = init_params(NetworkConfig.preset("base"), stream(0, "init"))
    with pytest.raises(CheckpointError, match="checkpoint.*\n.*config"):
        check_compatible(a, b)


def test_adamw_first_step_and_decay_mask():
    p = {"x.w": np.array([1.0, -2.0]), "x.b": np.array([1.0])}
    opt = AdamW(p, weight_decay=0.1)
    opt.step({"x.w": np.array([0.5, -0.5]), "x.b": np.array([2.0])}, lr=0.01)
    # first bias-corrected Adam step is lr * sign(g); decoupled decay on .w only
    np.testing.assert_allclose(p["x.w"], [1.0 * (1 - 0.001) - 0.01, -2.0 * (1 - 0.001) + 0.01], rtol=1e-6)
    np.testing.assert_allclose(p["x.b"], [1.0 - 0.01], rtol=1e-6)


def test_cls_embeddings_batching_is_invisible():
    arrays = _params(dtype=np.float32)
    x = _jets(7)
    np.testing.assert_array_equal(cls_embeddings(x, arrays, CFG, 3), cls_embeddings(x, arrays, CFG, 512))
