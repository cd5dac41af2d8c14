import numpy as np
import pytest

from lowprec.linear import LinearMode
from lowprec.model import (
    LayerScale,
    ModelConfig,
    backward,
    cross_entropy,
    forward,
    init_params,
    squared_error,
    transformer_block,
)
from lowprec.numerics import finite_difference_grad

SMALL = dict(depth=2, dim=8, heads=2, mlp_ratio=2.0)


def small_cfg(**kw):
    return ModelConfig(**{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(dim=8, heads=2, mlp_ratio=0.3)
    assert ModelConfig().hidden == 512


def test_param_names_embedding_first():
    cfg = small_cfg(layer_scale=LayerScale(True))
    p = init_params(cfg, 5, 3, seed=0)
    names = list(p)
    assert names[0] == "embed.weight"
    assert "blocks.1.gamma2" in p and p["blocks.0.attn.in_proj.weight"].shape == (24, 8)
    assert "blocks.0.gamma1" not in init_params(small_cfg(), 5, 3, seed=0)


def test_layer_scale_zero_init_is_identity():
    cfg = small_cfg(layer_scale=LayerScale(True, 0.0), linear_mode=LinearMode("SwitchBack"))
    p = init_params(cfg, 5, 3, seed=1)
    x = np.random.default_rng(0).standard_normal((12, 8)).astype(np.float32)
    for i in range(cfg.depth):
        np.testing.assert_array_equal(transformer_block(x, p, cfg, index=i, batch=3), x)


def test_zeroed_weights_without_layer_scale_is_identity():
    cfg = small_cfg()
    p = init_params(cfg, 5, 3, seed=1)
    for k in list(p):
        if k.startswith("blocks.0.") and k.endswith("proj.weight") or ".mlp." in k:
            p[k] = np.zeros_like(p[k])
    x = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
    np.testing.assert_array_equal(transformer_block(x, p, cfg), x)


def test_feature_magnitude_depth_constant_at_init():
    cfg = ModelConfig(depth=4, dim=32, heads=4, layer_scale=LayerScale(True, 0.0))
    p = init_params(cfg, 6, 3, seed=0)
    x = np.random.default_rng(1).standard_normal((2, 5, 6)).astype(np.float32)
    _, cache = forward(p, x, cfg)
    assert len(set(cache.feat_absmean)) == 1


def test_block_shape_errors():
    cfg = small_cfg()
    p = init_params(cfg, 5, 3, seed=0)
    with pytest.raises(ValueError):
        transformer_block(np.ones((4, 7), np.float32), p, cfg)
    with pytest.raises(ValueError):
        transformer_block(np.ones((5, 8), np.float32), p, cfg, batch=2)


def test_grid_aligned_block_matches_standard():
    # Zero norm gains make both norm outputs equal their biases, which sit on
    # the int8 grid (absmax 127/128, steps of 1/128). Every token is then
    # identical, so 4-token softmax weights are exactly 1/4, and permutation
    # weights keep every quantized product exact. fc2 is zero because GELU
    # leaves the grid.
    kw = dict(depth=1, dim=4, heads=1, mlp_ratio=1.0, embed_norm=False)
    cfg_std = ModelConfig(**kw)
    cfg_sb = ModelConfig(**kw, linear_mode=LinearMode("SwitchBack"))
    p = init_params(cfg_std, 4, 2, seed=0)
    eye = np.eye(4, dtype=np.float32)
    perm = eye[[1, 0, 3, 2]]
    p["blocks.0.attn.in_proj.weight"] = np.vstack([perm, eye, -perm])
    p["blocks.0.attn.out_proj.weight"] = eye
    p["blocks.0.mlp.fc1.weight"] = perm
    p["blocks.0.mlp.fc2.weight"] = np.zeros((4, 4), np.float32)
    for n in ("norm1", "norm2"):
        p[f"blocks.0.{n}.weight"] = np.zeros(4, np.float32)
        p[f"blocks.0.{n}.bias"] = np.array([127, -127, 64, 32], np.float32) / 128
    x = np.random.default_rng(0).standard_normal((4, 4)).astype(np.float32)
    np.testing.assert_array_equal(transformer_block(x, p, cfg_sb), transformer_block(x, p, cfg_std))


@pytest.mark.parametrize("layer_scale", [LayerScale(False), LayerScale(True, 0.3)])
@pytest.mark.parametrize("embed_norm", [True, False])
def test_backward_matches_finite_differences(layer_scale, embed_norm):
    cfg = small_cfg(layer_scale=layer_scale, embed_norm=embed_norm)
    p = init_params(cfg, 5, 3, seed=2, dtype=np.float64)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5))
    labels = np.array([0, 2])
    out, cache = forward(p, x, cfg)
    _, dout = cross_entropy(out, labels)
    grads = backward(p, cache, dout, cfg)
    assert set(grads) == set(p)
    for name in p:
        def f(v, name=name):
            q = dict(p)
            q[name] = v
            return cross_entropy(forward(q, x, cfg)[0], labels)[0]
        fd = finite_difference_grad(f, p[name], 1e-5)
        scale = max(np.max(np.abs(fd)), 1e-6)
        assert np.max(np.abs(grads[name] - fd)) <= 1e-5 * scale + 1e-9, name


def test_quantized_model_gradients_close_to_standard():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 6, 5)).astype(np.float32)
    labels = np.array([0, 1, 2, 1])
    ref = None
    for variant in ("Standard", "SwitchBack", "AllQuant"):
        cfg = ModelConfig(depth=1, dim=16, heads=2, linear_mode=LinearMode(variant))
        p = init_params(cfg, 5, 3, seed=0)
        out, cache = forward(p, x, cfg)
        grads = backward(p, cache, cross_entropy(out, labels)[1], cfg)
        if ref is None:
            ref = grads
            continue
        g, r = grads["embed.weight"], ref["embed.weight"]
        assert np.linalg.norm(g - r) / np.linalg.norm(r) < 0.1


def test_losses():
    loss, g = cross_entropy(np.zeros((2, 4), np.float32), np.array([1, 3]))
    assert np.isclose(loss, np.log(4))
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-7)
    loss, g = squared_error(np.array([[1.0, 2.0]], np.float32), np.array([[0.0, 0.0]]))
    assert loss == 2.5 and g.tolist() == [[1.0, 2.0]]
