"""VQ tokenizer: quantization semantics, grid contracts, trained behavior."""

import numpy as np
import pytest

from mimgen import datagen
from mimgen import tensor as T
from mimgen.errors import DivergenceError
from mimgen.vq import (
    Codebook,
    TokenGrid,
    VqConfig,
    VqTokenizer,
    token_count,
    train_tokenizer,
)


class TestTokenCount:
    def test_paper_scale(self):
        assert token_count(1024, 1024, 16) == 4096

    def test_desk_scale(self):
        assert token_count(32, 32, 4) == 64

    def test_single_token(self):
        assert token_count(4, 4, 4) == 1

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            token_count(33, 32, 4)


class TestTokenGrid:
    def test_mask_derived_from_indices(self):
        grid = TokenGrid(np.array([[0, 4], [2, 4]]), mask_index=4)
        np.testing.assert_array_equal(grid.mask, [[False, True], [False, True]])
        assert grid.masked_count() == 2

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            TokenGrid(np.array([[5]]), mask_index=4)

    def test_inconsistent_mask_rejected(self):
        with pytest.raises(ValueError):
            TokenGrid(np.array([[0]]), mask_index=4, mask=np.array([[True]]))


class TestQuantize:
    @pytest.fixture
    def tok(self):
        cfg = VqConfig(image_size=8, downsample_f=2, codebook_k=4, embed_d=2,
                       base_channels=4)
        return VqTokenizer(cfg, np.random.Generator(np.random.PCG64(0)))

    def test_exact_entry_has_zero_error(self, tok):
        tok.codebook.entries.data = np.array(
            [[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [-1.0, 3.0]], dtype=np.float32
        )
        latents = T.Tensor(np.array([[2.0], [0.5]], dtype=np.float32).reshape(1, 2, 1, 1))
        grids, zq, losses = tok.quantize(latents)
        assert grids[0].indices[0, 0] == 2
        assert float(losses["codebook"].data) == 0.0
        np.testing.assert_array_equal(zq.data, latents.data)

    def test_nearest_neighbor_matches_exhaustive_oracle(self, tok):
        rng = np.random.default_rng(1)
        entries = rng.normal(size=(4, 2)).astype(np.float32)
        tok.codebook.entries.data = entries
        flat = rng.normal(size=(50, 2)).astype(np.float32)
        got = tok.codebook.nearest(flat)
        for i, v in enumerate(flat):
            dists = [((v - e) ** 2).sum() for e in entries]
            assert got[i] == int(np.argmin(dists))

    def test_tie_breaks_to_lowest_index(self, tok):
        tok.codebook.entries.data = np.array([[0.0, 0.0], [1.0, 1.0], [9.0, 9.0], [9.0, -9.0]],
                                             dtype=np.float32)
        idx = tok.codebook.nearest(np.array([[0.5, 0.5]], dtype=np.float32))
        assert idx[0] == 0

    def test_empty_codebook_rejected(self):
        cb = Codebook(2, 2, np.random.Generator(np.random.PCG64(0)))
        cb.entries.data = np.zeros((0, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="empty"):
            cb.nearest(np.zeros((1, 2), dtype=np.float32))

    def test_latent_width_checked(self, tok):
        with pytest.raises(ValueError, match="width"):
            tok.quantize(T.Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32)))

    def test_straight_through_matches_identity_bypass(self):
        # 2-code toy: entries chosen so quantization maps each latent onto
        # itself, making the identity-bypass graph evaluate at the same point.
        # The straight-through gradient into the latents must then match.
        cfg = VqConfig(image_size=4, downsample_f=2, codebook_k=2, embed_d=2,
                       base_channels=4)
        tok = VqTokenizer(cfg, np.random.Generator(np.random.PCG64(0)))
        tok.codebook.entries.data = np.array([[0.25, -0.5], [1.0, 2.0]], dtype=np.float32)
        raw = np.array(
            [[[0.25, 1.0], [1.0, 0.25]], [[-0.5, 2.0], [2.0, -0.5]]], dtype=np.float32
        )[None]  # [1, 2, 2, 2]: cells alternate between the two entries

        downstream = T.Tensor(np.array([[0.3, -0.7], [0.2, 0.9]], dtype=np.float32))

        def loss_through(z, quantized):
            if quantized:
                _, path, _ = tok.quantize(z)
            else:
                path = z
            flat = T.reshape(T.transpose(path, (0, 2, 3, 1)), (4, 2))
            return T.tmean(T.matmul(flat, downstream) * T.matmul(flat, downstream))

        z1 = T.Tensor(raw.copy(), requires_grad=True)
        loss_through(z1, quantized=True).backward()
        z2 = T.Tensor(raw.copy(), requires_grad=True)
        loss_through(z2, quantized=False).backward()
        np.testing.assert_allclose(z1.grad, z2.grad, atol=1e-7)


class TestEncodeDecodeContracts:
    @pytest.fixture(scope="class")
    def tok(self):
        cfg = VqConfig(image_size=32, downsample_f=4, codebook_k=16, embed_d=8,
                       base_channels=8)
        return VqTokenizer(cfg, np.random.Generator(np.random.PCG64(3)))

    def test_shape_contract(self, tok):
        img = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
        grids = tok.encode_image(img)
        assert len(grids) == 2
        assert grids[0].indices.shape == (8, 8)
        assert not grids[0].mask.any()

    def test_out_of_range_pixels_rejected(self, tok):
        with pytest.raises(ValueError, match="\\[0, 1\\]"):
            tok.encode_image(np.full((3, 32, 32), 1.5, dtype=np.float32))

    def test_masked_grid_decode_rejected(self, tok):
        grid = TokenGrid(np.full((8, 8), 16, dtype=np.int64), 16)
        with pytest.raises(ValueError, match="masked"):
            tok.decode_tokens(grid)

    def test_decode_deterministic(self, tok):
        grid = TokenGrid(np.arange(64).reshape(8, 8) % 16, 16)
        a = tok.decode_tokens(grid)
        b = tok.decode_tokens(grid)
        np.testing.assert_array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestTraining:
    def test_one_image_memorization(self):
        img = datagen.render(
            datagen.SceneSpec("circle", "red", "blue", "center", "large"), 32
        )[None]
        tok, metrics = train_tokenizer(img, VqConfig(), 500, batch_size=1, lr=2e-3, seed=0)
        assert metrics["train_mse"] < 1e-3

    def test_zero_steps_equals_initialization(self):
        img = np.zeros((1, 3, 32, 32), dtype=np.float32)
        cfg = VqConfig(codebook_k=8, embed_d=4, base_channels=4)
        tok, _ = train_tokenizer(img, cfg, 0, seed=9)
        fresh = VqTokenizer(cfg, np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((9, 0)))
        ))
        for k, v in tok.state().items():
            np.testing.assert_array_equal(v, fresh.state()[k])

    def test_seeded_runs_bit_identical(self, mini_corpus):
        images, _ = mini_corpus
        cfg = VqConfig(codebook_k=16, embed_d=8, base_channels=8)
        tok1, m1 = train_tokenizer(images, cfg, 30, batch_size=2, seed=4)
        tok2, m2 = train_tokenizer(images, cfg, 30, batch_size=2, seed=4)
        assert m1["curve"] == m2["curve"]
        for k, v in tok1.state().items():
            np.testing.assert_array_equal(v, tok2.state()[k])

    def test_nan_aborts_with_diagnostic(self):
        img = np.full((1, 3, 32, 32), np.inf, dtype=np.float32)
        with pytest.raises(DivergenceError):
            train_tokenizer(img, VqConfig(codebook_k=8, embed_d=4, base_channels=4),
                            5, batch_size=1, seed=0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            train_tokenizer(np.zeros((0, 3, 32, 32), dtype=np.float32), VqConfig(), 5)

    def test_loss_curve_decreases(self, mini_corpus):
        images, _ = mini_corpus
        _, metrics = train_tokenizer(images, VqConfig(codebook_k=16, embed_d=8,
                                                      base_channels=8),
                                     200, batch_size=4, seed=0)
        recon = [r for _, r, _ in metrics["curve"]]
        assert np.mean(recon[-20:]) < np.mean(recon[:20])


class TestTrainedProperties:
    """Observed properties of the memorizing tokenizer (shared fixture)."""

    def test_constant_color_images_encode_uniformly(self, mini_tokenizer):
        for color in ("red", "blue", "yellow", "white"):
            rgb = np.array(datagen.PALETTE[color], dtype=np.float32) / 255.0
            img = np.broadcast_to(rgb[:, None, None], (3, 32, 32)).copy()
            grid = mini_tokenizer.encode_image(img)[0]
            assert len(np.unique(grid.indices)) == 1, color

    def test_reencode_idempotence_token_exact(self, mini_tokenizer, mini_corpus):
        images, _ = mini_corpus
        for img in images:
            g1 = mini_tokenizer.encode_image(img)[0]
            g2 = mini_tokenizer.encode_image(mini_tokenizer.decode_tokens(g1))[0]
            np.testing.assert_array_equal(g1.indices, g2.indices)

    def test_repeated_index_decodes_to_uniform_texture(self, mini_tokenizer):
        used = np.flatnonzero(mini_tokenizer.codebook.usage_counts)
        grid = TokenGrid(np.full((8, 8), used[0], dtype=np.int64), 256)
        img = mini_tokenizer.decode_tokens(grid)
        assert img.std(axis=(1, 2)).max() < 0.05

    def test_round_trip_mse_low(self, mini_tokenizer, mini_corpus):
        images, _ = mini_corpus
        assert mini_tokenizer.reconstruction_mse(images) < 0.02
