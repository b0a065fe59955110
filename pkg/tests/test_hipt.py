"""Hierarchical ViT stack: token layout, stage contracts, persistence."""

import numpy as np
import pytest

from slidelab.engine import Graph, Rng, backward, ops
from slidelab.errors import ConfigError, ShapeError
from slidelab.hipt import (
    EMBED_DIM,
    STAGES,
    FullForward,
    HierarchicalModel,
    ViTConfig,
    default_configs,
    init_stage_arrays,
    patches_to_tokens,
    pos_index_stage1,
    pos_index_stage2,
    pos_index_stage3,
    vit_forward,
)


# -- config ------------------------------------------------------------------


def test_default_configs_position_tables():
    cfgs = default_configs()
    assert set(cfgs) == set(STAGES)
    assert cfgs["stage1"].in_dim == 48
    assert cfgs["stage1"].n_pos == 17  # cls + 16 tokens
    assert cfgs["stage2"].in_dim == EMBED_DIM
    assert cfgs["stage2"].n_pos == 257  # cls + 16x16 patch grid
    assert cfgs["stage3"].in_dim == EMBED_DIM
    assert cfgs["stage3"].n_pos == 17  # cls + 4x4 region grid


def test_vit_config_head_split():
    cfg = ViTConfig(in_dim=8, n_pos=5, embed_dim=32, heads=4, mlp_ratio=2)
    assert cfg.head_dim == 8
    assert cfg.hidden_dim == 64
    with pytest.raises(ConfigError):
        ViTConfig(in_dim=8, n_pos=5, embed_dim=30, heads=4)


def test_init_arrays_deterministic_and_typed():
    cfg = default_configs()["stage1"]
    a = init_stage_arrays(cfg, Rng(3))
    b = init_stage_arrays(cfg, Rng(3))
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
        assert a[k].dtype == np.float32
    np.testing.assert_array_equal(a["b0.ln1_g"], np.ones(cfg.embed_dim, dtype=np.float32))
    np.testing.assert_array_equal(a["b0.q_b"], np.zeros(cfg.embed_dim, dtype=np.float32))
    assert np.any(a["embed_w"] != 0.0)


# -- position indices --------------------------------------------------------


def test_stage2_small_crop_is_center_block():
    # small regions cover the central 4x4 cells of the 16x16 patch grid
    idx = pos_index_stage2("small")
    assert idx[0] == 0
    expect = [1 + r * 16 + c for r in range(6, 10) for c in range(6, 10)]
    np.testing.assert_array_equal(idx[1:], expect)
    with pytest.raises(ConfigError):
        pos_index_stage2("medium")


def test_stage2_large_covers_full_grid():
    np.testing.assert_array_equal(pos_index_stage2("large"), np.arange(257))


def test_stage3_grid_rows():
    np.testing.assert_array_equal(pos_index_stage3(1), [0, 1])
    np.testing.assert_array_equal(pos_index_stage3(2), [0, 1, 2, 5, 6])
    with pytest.raises(ConfigError):
        pos_index_stage3(0)
    with pytest.raises(ConfigError):
        pos_index_stage3(5)


# -- token layout ------------------------------------------------------------


def test_patches_to_tokens_u8_scaling():
    patches = np.full((1, 16, 16, 3), 255, dtype=np.uint8)
    tokens = patches_to_tokens(patches)
    assert tokens.shape == (1, 16, 48)
    assert tokens.dtype == np.float32
    np.testing.assert_array_equal(tokens, np.ones((1, 16, 48), dtype=np.float32))


def test_patches_to_tokens_float_passthrough():
    patches = np.full((2, 16, 16, 3), 0.25, dtype=np.float32)
    np.testing.assert_array_equal(patches_to_tokens(patches), np.full((2, 16, 48), 0.25, dtype=np.float32))


def test_patches_to_tokens_cell_layout():
    patches = np.zeros((1, 16, 16, 3), dtype=np.uint8)
    patches[0, 4:8, 8:12, 1] = 255  # cell row 1, cell col 2, green
    tokens = patches_to_tokens(patches)
    token_index = 1 * 4 + 2
    assert tokens[0, token_index].sum() == pytest.approx(16.0)
    others = np.delete(tokens[0], token_index, axis=0)
    assert np.all(others == 0.0)


def test_patches_to_tokens_shape_guard():
    with pytest.raises(ShapeError):
        patches_to_tokens(np.zeros((4, 8, 8, 3), dtype=np.uint8))


# -- stage forward against an independent oracle -----------------------------


def _oracle_vit(cfg, params, tokens, pos_index):
    """Plain-numpy transformer mirror, written independently of the graph ops."""
    def layer_norm(x, gamma, beta):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def softmax(z):
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))

    p = {k: v.astype(np.float64) for k, v in params.items()}
    b, t, _ = tokens.shape
    d, H = cfg.embed_dim, cfg.heads
    hd = cfg.head_dim
    x = tokens @ p["embed_w"] + p["embed_b"]
    cls = np.broadcast_to(p["cls"][None], (b, 1, d))
    x = np.concatenate([cls, x], axis=1)
    x = x + p["pos"][pos_index]
    n = t + 1
    for i in range(cfg.depth):
        h = layer_norm(x, p[f"b{i}.ln1_g"], p[f"b{i}.ln1_b"])
        qkv = h @ p[f"b{i}.qkv_w"]
        q = qkv[:, :, :d] + p[f"b{i}.q_b"]
        k = qkv[:, :, d:2 * d]
        v = qkv[:, :, 2 * d:] + p[f"b{i}.v_b"]
        q = q.reshape(b, n, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(b, n, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(b, n, H, hd).transpose(0, 2, 1, 3)
        att = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd))
        mix = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + (mix @ p[f"b{i}.proj_w"] + p[f"b{i}.proj_b"])
        h = layer_norm(x, p[f"b{i}.ln2_g"], p[f"b{i}.ln2_b"])
        h = gelu(h @ p[f"b{i}.fc1_w"] + p[f"b{i}.fc1_b"]) @ p[f"b{i}.fc2_w"] + p[f"b{i}.fc2_b"]
        x = x + h
    x = layer_norm(x, p["ln_f_g"], p["ln_f_b"])
    return x[:, 0], x


def test_stage1_matches_numpy_oracle():
    cfg = default_configs()["stage1"]
    params = init_stage_arrays(cfg, Rng(11))
    tokens = np.random.default_rng(0).uniform(0.0, 1.0, size=(2, 16, 48))
    want_cls, want_all = _oracle_vit(cfg, params, tokens, pos_index_stage1())
    with Graph(dtype=np.float64) as g:
        p = {k: g.constant(v) for k, v in params.items()}
        cls, full = vit_forward(g, cfg, p, g.constant(tokens), pos_index_stage1())
        np.testing.assert_allclose(cls.data, want_cls, rtol=0, atol=1e-10)
        np.testing.assert_allclose(full.data, want_all, rtol=0, atol=1e-10)


def test_stage3_small_batch_matches_oracle():
    cfg = default_configs()["stage3"]
    params = init_stage_arrays(cfg, Rng(12))
    embeds = np.random.default_rng(1).normal(size=(1, 4, EMBED_DIM))
    want_cls, _ = _oracle_vit(cfg, params, embeds, pos_index_stage3(2))
    with Graph(dtype=np.float64) as g:
        p = {k: g.constant(v) for k, v in params.items()}
        cls, _ = vit_forward(g, cfg, p, g.constant(embeds), pos_index_stage3(2))
        np.testing.assert_allclose(cls.data, want_cls, rtol=0, atol=1e-10)


def test_vit_forward_shape_guards():
    cfg = default_configs()["stage1"]
    params = init_stage_arrays(cfg, Rng(0))
    with Graph(dtype=np.float64) as g:
        p = {k: g.constant(v) for k, v in params.items()}
        with pytest.raises(ShapeError):
            vit_forward(g, cfg, p, g.constant(np.zeros((2, 16, 47))), pos_index_stage1())
        with pytest.raises(ShapeError):
            vit_forward(g, cfg, p, g.constant(np.zeros((2, 15, 48))), pos_index_stage1())


def test_region_order_changes_slide_embedding():
    # position embeddings must break permutation invariance across regions
    model = HierarchicalModel(seed=5)
    embeds = np.random.default_rng(2).normal(size=(1, 4, EMBED_DIM)).astype(np.float32)
    with Graph(dtype=np.float32) as g:
        bound = model.bind(g, train_stages=())
        a, _ = model.stage3_forward(g, bound, g.constant(embeds), 2)
        b, _ = model.stage3_forward(g, bound, g.constant(embeds[:, [1, 0, 2, 3]]), 2)
        assert not np.allclose(a.data, b.data)


# -- whole-slide pass --------------------------------------------------------


def _random_slide(grid, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(grid * grid * 256, 16, 16, 3), dtype=np.uint8).astype(np.uint8)


def test_full_forward_output_shapes_grid2():
    model = HierarchicalModel(seed=1)
    patches = _random_slide(2)
    with Graph(dtype=np.float32) as g:
        with g.no_grad():
            bound = {k: g.constant(v) for k, v in model.arrays.items()}
            out = model.full_forward(g, bound, patches, 2)
            assert out.patch_embeds.data.shape == (1024, EMBED_DIM)
            assert out.region_embeds.data.shape == (4, EMBED_DIM)
            assert out.slide_embed.data.shape == (1, EMBED_DIM)


def test_full_forward_matches_manual_chaining():
    model = HierarchicalModel(seed=2)
    patches = _random_slide(1, seed=3)
    with Graph(dtype=np.float32) as g:
        with g.no_grad():
            bound = {k: g.constant(v) for k, v in model.arrays.items()}
            out = model.full_forward(g, bound, patches, 1)
            auto = np.array(out.slide_embed.data, copy=True)
            patch_auto = np.array(out.patch_embeds.data, copy=True)
    with Graph(dtype=np.float32) as g:
        with g.no_grad():
            bound = {k: g.constant(v) for k, v in model.arrays.items()}
            tokens = g.constant(patches_to_tokens(patches))
            cls1, _ = model.stage1_forward(g, bound, tokens)
            cls2, _ = model.stage2_forward(g, bound, ops.reshape(cls1, (1, 256, EMBED_DIM)), "large")
            cls3, _ = model.stage3_forward(g, bound, ops.reshape(cls2, (1, 1, EMBED_DIM)), 1)
            np.testing.assert_array_equal(cls1.data, patch_auto)
            np.testing.assert_array_equal(cls3.data, auto)


def test_full_forward_patch_count_guard():
    model = HierarchicalModel(seed=0)
    with Graph(dtype=np.float32) as g:
        bound = {k: g.constant(v) for k, v in model.arrays.items()}
        with pytest.raises(ShapeError):
            model.full_forward(g, bound, _random_slide(1), 2)


def test_bind_freeze_flags():
    model = HierarchicalModel(seed=0)
    with Graph(dtype=np.float32) as g:
        bound = model.bind(g, train_stages=("stage1", "stage2"))
        for name, t in bound.items():
            stage = name.split(".", 1)[0]
            assert t.requires_grad == (stage in ("stage1", "stage2"))


def test_frozen_stage_gets_no_gradient():
    model = HierarchicalModel(seed=4)
    patches = _random_slide(1, seed=5)
    with Graph(dtype=np.float32) as g:
        bound = model.bind(g, train_stages=("stage1",))
        out = model.full_forward(g, bound, patches, 1)
        backward(ops.sum(out.patch_embeds))
        for name, t in bound.items():
            stage = name.split(".", 1)[0]
            if stage == "stage1":
                assert t.grad is not None
            else:
                assert not t.requires_grad


def test_stage_view_strips_prefix():
    model = HierarchicalModel(seed=0)
    with Graph(dtype=np.float32) as g:
        bound = model.bind(g)
        view = HierarchicalModel.stage_view(bound, "stage2")
        assert "embed_w" in view
        assert all(not k.startswith("stage") for k in view)


# -- persistence -------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    model = HierarchicalModel(seed=9)
    model.save(tmp_path / "m")
    back = HierarchicalModel.load(tmp_path / "m")
    assert set(back.arrays) == set(model.arrays)
    for k in model.arrays:
        np.testing.assert_array_equal(back.arrays[k], model.arrays[k])
    patches = _random_slide(1, seed=6)
    with Graph(dtype=np.float32) as g:
        with g.no_grad():
            a = model.full_forward(g, {k: g.constant(v) for k, v in model.arrays.items()}, patches, 1)
            b = back.full_forward(g, {k: g.constant(v) for k, v in back.arrays.items()}, patches, 1)
            np.testing.assert_array_equal(a.slide_embed.data, b.slide_embed.data)


def test_load_missing_config_raises(tmp_path):
    from slidelab.errors import DataError

    (tmp_path / "empty").mkdir()
    with pytest.raises(DataError):
        HierarchicalModel.load(tmp_path / "empty")


def test_copy_is_deep():
    model = HierarchicalModel(seed=0)
    dup = model.copy()
    dup.arrays["stage1.embed_w"][0, 0] += 1.0
    assert model.arrays["stage1.embed_w"][0, 0] != dup.arrays["stage1.embed_w"][0, 0]
