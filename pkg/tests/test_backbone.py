"""Backbone: rotary positions, QK-Norm attention, blocks, conditioning."""

import numpy as np
import pytest

from mimgen import tensor as T
from mimgen.backbone import (
    Backbone,
    ConditionBundle,
    MicroConditions,
    ModelConfig,
    MultiModalBlock,
    SingleModalBlock,
    rope_rotate,
    rope_tables,
)
from mimgen.text import tokenize
from mimgen.trainer import build_model
from tests.conftest import TINY_MODEL_CFG


def tiny_model(seed=0, **overrides):
    from dataclasses import replace

    from mimgen import datagen
    from mimgen.text import Vocabulary

    cfg = replace(TINY_MODEL_CFG, **overrides)
    return build_model(cfg, Vocabulary(datagen.caption_words()), seed), cfg


class TestRope:
    def test_position_zero_is_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 8))
        out = rope_rotate(T.Tensor(x, dtype=np.float64), np.array([0]), 10000.0)
        np.testing.assert_array_equal(out.data, x)

    def test_two_dims_is_plane_rotation(self):
        # With D=2 the single pair rotates by exactly `position` radians.
        out = rope_rotate(
            T.Tensor(np.array([[1.0, 0.0]]), dtype=np.float64),
            np.array([np.pi / 2]), 10000.0,
        )
        np.testing.assert_allclose(out.data, [[0.0, 1.0]], atol=1e-6)
        angle = 0.7
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        v = np.array([0.3, -1.2])
        out = rope_rotate(T.Tensor(v[None], dtype=np.float64), np.array([angle]), 10000.0)
        np.testing.assert_allclose(out.data[0], rot @ v, atol=1e-12)

    def test_relative_position_property(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(1000):
            q, k = rng.normal(size=16), rng.normal(size=16)
            i, j = rng.integers(0, 64, size=2)
            qi = rope_rotate(T.Tensor(q[None], dtype=np.float64), np.array([i]), 10000.0).data[0]
            kj = rope_rotate(T.Tensor(k[None], dtype=np.float64), np.array([j]), 10000.0).data[0]
            rel = rope_rotate(T.Tensor(q[None], dtype=np.float64), np.array([i - j]), 10000.0).data[0]
            worst = max(worst, abs(float(qi @ kj) - float(rel @ k)))
        assert worst < 1e-6

    def test_odd_head_dim_rejected(self):
        with pytest.raises(ValueError, match="even"):
            rope_tables(np.arange(4), 7, 10000.0)


class TestQkNormAttention:
    def test_single_token_returns_its_value(self):
        model, cfg = tiny_model()
        stream = model.backbone.sm_blocks[0].image
        x = T.Tensor(np.random.default_rng(0).normal(size=(1, 1, cfg.d_model)).astype(np.float32))
        cos, sin = rope_tables(np.arange(1), cfg.d_model // cfg.n_heads, cfg.rope_base)
        q, k, v = stream.heads(x, cos, sin, cfg.n_heads)
        from mimgen.backbone import _attention_core, _merge_heads

        out = _merge_heads(_attention_core(q, k, v)).data
        np.testing.assert_allclose(out, _merge_heads(v).data, atol=1e-6)

    def test_duplicate_tokens_attend_uniformly_without_rope(self):
        model, cfg = tiny_model()
        stream = model.backbone.sm_blocks[0].image
        rng = np.random.default_rng(2)
        row = rng.normal(size=(1, 1, cfg.d_model)).astype(np.float32)
        x = T.Tensor(np.repeat(row, 5, axis=1))
        hd = cfg.d_model // cfg.n_heads
        cos, sin = rope_tables(np.zeros(5, dtype=np.int64), hd, cfg.rope_base)
        q, k, v = stream.heads(x, cos, sin, cfg.n_heads)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        weights = T.softmax(scores, axis=-1).data
        np.testing.assert_allclose(weights, np.full_like(weights, 1 / 5), atol=1e-6)

    def test_scaling_qk_projections_leaves_weights_unchanged(self):
        model, cfg = tiny_model()
        model.cast(np.float64)
        stream = model.backbone.sm_blocks[0].image
        rng = np.random.default_rng(3)
        x = T.Tensor(rng.normal(size=(1, 6, cfg.d_model)), dtype=np.float64)
        hd = cfg.d_model // cfg.n_heads
        cos, sin = rope_tables(np.arange(6), hd, cfg.rope_base)

        def weights():
            q, k, _ = stream.heads(x, cos, sin, cfg.n_heads)
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
            return T.softmax(scores, axis=-1).data

        before = weights()
        for proj in (stream.q_proj, stream.k_proj):
            proj.weight.data *= 10.0
            proj.bias.data *= 10.0
        after = weights()
        assert np.abs(after - before).max() < 1e-6


class TestEmbedTokens:
    def test_fully_masked_grid_repeats_mask_row(self):
        model, cfg = tiny_model()
        grid = np.full((1, cfg.grid_h, cfg.grid_w), cfg.codebook_k, dtype=np.int64)
        emb = model.backbone.token_embed(grid.reshape(1, -1)).data
        row = model.backbone.token_embed.table.data[cfg.codebook_k]
        np.testing.assert_array_equal(emb[0], np.tile(row, (cfg.n_tokens, 1)))

    def test_single_cell_change_is_local(self):
        model, cfg = tiny_model()
        a = np.zeros((1, cfg.n_tokens), dtype=np.int64)
        b = a.copy()
        b[0, 5] = 3
        ea = model.backbone.token_embed(a).data
        eb = model.backbone.token_embed(b).data
        diff = np.abs(ea - eb).sum(axis=-1)[0]
        assert diff[5] > 0
        assert (diff[np.arange(cfg.n_tokens) != 5] == 0).all()

    def test_row_major_flattening(self):
        # Cell (row=1, col=0) of a width-8 grid lands at sequence position 8.
        model, _ = tiny_model()
        grid = np.zeros((1, 2, 8), dtype=np.int64)
        grid[0, 1, 0] = 7
        emb = model.backbone.token_embed(grid.reshape(1, -1)).data
        row7 = model.backbone.token_embed.table.data[7]
        np.testing.assert_array_equal(emb[0, 8], row7)

    def test_out_of_range_index_rejected(self):
        model, cfg = tiny_model()
        ids = tokenize("a", model.vocab, cfg.text_len)[None, :]
        grid = np.full((1, cfg.grid_h, cfg.grid_w), cfg.codebook_k + 1, dtype=np.int64)
        with pytest.raises(ValueError):
            model.forward_ids(grid, ids, MicroConditions.single(16, 16), np.array([0]))


def _forward_setup(model, cfg, seed=0, level=500):
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, cfg.codebook_k + 1, size=(1, cfg.grid_h, cfg.grid_w))
    ids = tokenize("a red circle on a blue background", model.vocab, cfg.text_len)[None, :]
    micro = MicroConditions.single(cfg.grid_h * 4, cfg.grid_w * 4)
    return grid, ids, micro, np.array([level])


class TestBlocks:
    def test_zero_gate_blocks_are_identity(self):
        model, cfg = tiny_model()
        rng = np.random.default_rng(0)
        img = T.Tensor(rng.normal(size=(2, cfg.n_tokens, cfg.d_model)).astype(np.float32))
        txt = T.Tensor(rng.normal(size=(2, 4, cfg.d_model)).astype(np.float32))
        y = T.Tensor(rng.normal(size=(2, cfg.d_cond)).astype(np.float32))
        hd = cfg.d_model // cfg.n_heads
        cos, sin = rope_tables(np.arange(4 + cfg.n_tokens), hd, cfg.rope_base)
        mm = model.backbone.mm_blocks[0]
        out_img, out_txt = mm(img, txt, y, cos, sin)
        np.testing.assert_array_equal(out_img.data, img.data)
        np.testing.assert_array_equal(out_txt.data, txt.data)
        sm = model.backbone.sm_blocks[0]
        out = sm(img, y, cos[4:], sin[4:])
        np.testing.assert_array_equal(out.data, img.data)

    def test_full_stack_identity_at_init(self):
        model, cfg = tiny_model()
        grid, ids, micro, levels = _forward_setup(model, cfg)
        with T.no_grad():
            logits = model.forward_ids(grid, ids, micro, levels).data
            emb = model.backbone.token_embed(grid.reshape(1, -1))
            ref = model.backbone.head(T.layer_norm(emb, None, None)).data
        np.testing.assert_array_equal(logits, ref)

    def test_missing_text_stream_rejected(self):
        model, cfg = tiny_model()
        mm = model.backbone.mm_blocks[0]
        with pytest.raises(ValueError, match="text"):
            mm(T.Tensor(np.zeros((1, 4, cfg.d_model), dtype=np.float32)), None, None, None, None)

    def test_text_changes_image_stream_after_random_gates(self):
        model, cfg = tiny_model(seed=1)
        # Wake the gates up so cross-modal flow is visible at random init.
        rng = np.random.default_rng(9)
        for block in model.backbone.mm_blocks:
            for stream in (block.image, block.text):
                stream.mod.weight.data = rng.normal(
                    0, 0.2, size=stream.mod.weight.data.shape
                ).astype(np.float32)
        grid, _, micro, levels = _forward_setup(model, cfg)
        ids_a = tokenize("a red circle", model.vocab, cfg.text_len)[None, :]
        ids_b = tokenize("a blue circle", model.vocab, cfg.text_len)[None, :]
        with T.no_grad():
            la = model.forward_ids(grid, ids_a, micro, levels).data
            lb = model.forward_ids(grid, ids_b, micro, levels).data
        assert np.abs(la - lb).max() > 0

    def test_single_modal_equals_multimodal_with_empty_text(self):
        model, cfg = tiny_model(seed=2)
        mm = MultiModalBlock(cfg, np.random.Generator(np.random.PCG64(5)))
        sm = SingleModalBlock(cfg, np.random.Generator(np.random.PCG64(6)))
        sm.image.load_state(mm.image.state())
        rng = np.random.default_rng(7)
        for stream in (mm.image, mm.text):
            stream.mod.weight.data = rng.normal(0, 0.2, size=stream.mod.weight.data.shape).astype(np.float32)
        sm.image.mod.weight.data = mm.image.mod.weight.data.copy()
        sm.image.mod.bias.data = mm.image.mod.bias.data.copy()
        img = T.Tensor(rng.normal(size=(2, cfg.n_tokens, cfg.d_model)).astype(np.float32))
        txt = T.Tensor(np.zeros((2, 0, cfg.d_model), dtype=np.float32))
        y = T.Tensor(rng.normal(size=(2, cfg.d_cond)).astype(np.float32))
        hd = cfg.d_model // cfg.n_heads
        cos, sin = rope_tables(np.arange(cfg.n_tokens), hd, cfg.rope_base)
        out_mm, _ = mm(img, txt, y, cos, sin)
        out_sm = sm(img, y, cos, sin)
        np.testing.assert_allclose(out_mm.data, out_sm.data, atol=1e-6)

    def test_stability_at_large_magnitude_inputs(self):
        model, cfg = tiny_model(seed=3)
        rng = np.random.default_rng(8)
        for block in model.backbone.mm_blocks:
            for stream in (block.image, block.text):
                stream.mod.weight.data = rng.normal(0, 0.2, size=stream.mod.weight.data.shape).astype(np.float32)
        mm = model.backbone.mm_blocks[0]
        img = T.Tensor((rng.normal(size=(1, cfg.n_tokens, cfg.d_model)) * 1e3).astype(np.float32))
        txt = T.Tensor((rng.normal(size=(1, 4, cfg.d_model)) * 1e3).astype(np.float32))
        y = T.Tensor(rng.normal(size=(1, cfg.d_cond)).astype(np.float32))
        hd = cfg.d_model // cfg.n_heads
        cos, sin = rope_tables(np.arange(4 + cfg.n_tokens), hd, cfg.rope_base)
        out_img, out_txt = mm(img, txt, y, cos, sin)
        assert np.isfinite(out_img.data).all()
        assert np.isfinite(out_txt.data).all()


class TestCondition:
    def test_rate_levels_change_y(self):
        model, cfg = tiny_model()
        pooled = T.Tensor(np.ones((1, cfg.d_text), dtype=np.float32))
        micro = MicroConditions.single(16, 16)
        y0 = model.backbone.build_condition(ConditionBundle(pooled, micro, np.array([0]))).data
        y999 = model.backbone.build_condition(ConditionBundle(pooled, micro, np.array([999]))).data
        assert np.linalg.norm(y0 - y999) > 0

    def test_preference_clamped(self):
        model, cfg = tiny_model()
        pooled = T.Tensor(np.ones((1, cfg.d_text), dtype=np.float32))
        y_clamped = model.backbone.build_condition(
            ConditionBundle(pooled, MicroConditions.single(16, 16, preference=1.7), np.array([5]))
        ).data
        y_one = model.backbone.build_condition(
            ConditionBundle(pooled, MicroConditions.single(16, 16, preference=1.0), np.array([5]))
        ).data
        np.testing.assert_array_equal(y_clamped, y_one)

    def test_non_finite_preference_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            MicroConditions.single(16, 16, preference=np.nan).clamped_preference()

    def test_y_deterministic(self):
        model, cfg = tiny_model()
        pooled = T.Tensor(np.ones((1, cfg.d_text), dtype=np.float32))
        bundle = ConditionBundle(pooled, MicroConditions.single(16, 16), np.array([7]))
        a = model.backbone.build_condition(bundle).data
        b = model.backbone.build_condition(bundle).data
        np.testing.assert_array_equal(a, b)
        assert np.isfinite(a).all()


class TestCompression:
    def test_compressed_grid_shapes(self):
        model, cfg = tiny_model(grid_h=16, grid_w=16, compression_enabled=True,
                                compression_threshold=16)
        assert cfg.compression_active
        assert cfg.inner_grid == (8, 8)
        grid, ids, micro, levels = _forward_setup(model, cfg)
        with T.no_grad():
            logits = model.forward_ids(grid, ids, micro, levels)
        assert logits.data.shape == (1, 256, cfg.codebook_k)

    def test_compress_decompress_round_trip_shape_and_grad(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 4, 4))
        wc = rng.normal(size=(3, 3, 2, 2)) * 0.4
        wd = rng.normal(size=(3, 3, 2, 2)) * 0.4

        def composite(xv, wcv, wdv):
            mid = T.conv2d(xv, wcv, stride=2)
            return T.tsum(T.conv_transpose2d(mid, wdv, stride=2))

        out = T.conv_transpose2d(T.conv2d(T.Tensor(x), T.Tensor(wc), stride=2),
                                 T.Tensor(wd), stride=2)
        assert out.data.shape == x.shape
        report = T.grad_check(composite, [x, wc, wd], h=1e-4)
        assert report.passed, report.max_rel_error

    def test_disabled_matches_inactive_threshold_bit_exact(self):
        model_off, cfg_off = tiny_model(seed=4, compression_enabled=False)
        model_thresh, cfg_thresh = tiny_model(seed=4, compression_enabled=True,
                                              compression_threshold=64)
        assert not cfg_thresh.compression_active
        grid, ids, micro, levels = _forward_setup(model_off, cfg_off)
        with T.no_grad():
            a = model_off.forward_ids(grid, ids, micro, levels).data
            b = model_thresh.forward_ids(grid, ids, micro, levels).data
        np.testing.assert_array_equal(a, b)

    def test_odd_grid_with_compression_rejected(self):
        with pytest.raises(ValueError, match="even"):
            ModelConfig(d_model=32, n_heads=2, grid_h=17, grid_w=17,
                        compression_enabled=True, compression_threshold=16).inner_grid


class TestForward:
    def test_logits_shape_and_finite_for_masked_input(self):
        model, cfg = tiny_model()
        grid = np.full((2, cfg.grid_h, cfg.grid_w), cfg.codebook_k, dtype=np.int64)
        ids = np.stack([tokenize("a red circle", model.vocab, cfg.text_len)] * 2)
        micro = MicroConditions(np.full(2, 16), np.full(2, 16), np.zeros(2, np.int64),
                                np.zeros(2, np.int64), np.full(2, 1.0))
        with T.no_grad():
            logits = model.forward_ids(grid, ids, micro, np.array([999, 999]))
        assert logits.data.shape == (2, cfg.n_tokens, cfg.codebook_k)
        assert np.isfinite(logits.data).all()

    def test_mask_row_gradient_isolated(self):
        # With no masked inputs anywhere, the mask-token embedding row gets
        # exactly zero gradient.
        from mimgen.trainer import masked_ce_loss

        model, cfg = tiny_model()
        rng = np.random.default_rng(0)
        truth = rng.integers(0, cfg.codebook_k, size=(1, cfg.grid_h, cfg.grid_w))
        flags = np.zeros((1, cfg.n_tokens), dtype=bool)
        flags[0, 3] = True  # loss needs one active cell; input stays unmasked
        ids = tokenize("a red circle", model.vocab, cfg.text_len)[None, :]
        logits = model.forward_ids(truth, ids, MicroConditions.single(16, 16), np.array([0]))
        loss = masked_ce_loss(logits, truth.reshape(1, -1), flags)
        model.zero_grad()
        loss.backward()
        table_grad = model.backbone.token_embed.table.grad
        assert table_grad is not None
        np.testing.assert_array_equal(table_grad[cfg.codebook_k], 0.0)
        assert np.abs(table_grad[: cfg.codebook_k]).sum() > 0

    def test_grid_size_mismatch_rejected(self):
        model, cfg = tiny_model()
        ids = tokenize("a", model.vocab, cfg.text_len)[None, :]
        with pytest.raises(ValueError, match="grid"):
            model.forward_ids(np.zeros((1, 2, 2), dtype=np.int64), ids,
                              MicroConditions.single(16, 16), np.array([0]))

    def test_forward_count_increments(self):
        model, cfg = tiny_model()
        grid, ids, micro, levels = _forward_setup(model, cfg)
        start = model.backbone.forward_count
        with T.no_grad():
            model.forward_ids(grid, ids, micro, levels)
            model.forward_ids(grid, ids, micro, levels)
        assert model.backbone.forward_count == start + 2


def test_rate_condition_sensitivity_on_trained_model(mini_t2i):
    model = mini_t2i["model"]
    cfg = model.model_cfg
    grid = np.full((1, cfg.grid_h, cfg.grid_w), cfg.codebook_k, dtype=np.int64)
    grid[0, 0, 0] = mini_t2i["grids"][0].indices[0, 0]
    ids = tokenize(mini_t2i["captions"][0], model.vocab, cfg.text_len)[None, :]
    micro = MicroConditions.single(32, 32)
    with T.no_grad():
        l0 = model.forward_ids(grid, ids, micro, np.array([0])).data
        l999 = model.forward_ids(grid, ids, micro, np.array([999])).data
    assert np.abs(l0 - l999).max() > 1e-4
