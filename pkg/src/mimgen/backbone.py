"""Hybrid multi-modal / single-modal transformer over token grids.

Layout: token embeddings (one learned row per codebook entry plus a mask
row) -> optional stride-2 feature compression -> dual-stream blocks where
text and image attend jointly -> image-only blocks at twice the depth ->
modulated final norm -> optional decompression -> linear head over the
codebook.

Conditioning follows the adaptive-norm pattern: the pooled text vector,
sinusoidally embedded micro-conditions (source resolution, crop offsets,
preference score), and the discretized masking-rate level are fused by an
MLP into one vector y, and every block derives per-stream shift/scale/gate
triples from y through zero-initialized projections. Zero gates make each
block the identity at initialization.

Queries and keys are RMS-normalized per head before rotary positions are
applied; one 1D rotary sequence covers both streams (text occupies
positions 0..L-1, image continues at L..L+N-1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvTranspose2d, Embedding, LayerNorm, Linear, Module, RMSNorm
from .schedule import sinusoidal_embed_many
from .text import TextConfig, TextEncoder, Vocabulary


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    depth_mm: int = 2
    depth_sm: int = 4
    rope_base: float = 10000.0
    codebook_k: int = 256
    d_text: int = 128
    d_cond: int = 128
    grid_h: int = 8
    grid_w: int = 8
    text_len: int = 16
    ffn_mult: int = 2
    sin_dim: int = 32
    compression_enabled: bool = True
    compression_threshold: int = 16

    def __post_init__(self):
        if self.d_model % (2 * self.n_heads):
            raise ValueError("d_model must be divisible by 2 * n_heads (rotary pairs)")
        if self.sin_dim % 2:
            raise ValueError("sin_dim must be even")

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def compression_active(self) -> bool:
        return self.compression_enabled and max(self.grid_h, self.grid_w) >= self.compression_threshold

    @property
    def inner_grid(self):
        if self.compression_active:
            if self.grid_h % 2 or self.grid_w % 2:
                raise ValueError("compression needs even grid extents")
            return self.grid_h // 2, self.grid_w // 2
        return self.grid_h, self.grid_w


@dataclass
class MicroConditions:
    """Per-item scalar side inputs, each an array of length B."""

    original_h: np.ndarray
    original_w: np.ndarray
    crop_x: np.ndarray
    crop_y: np.ndarray
    preference: np.ndarray

    @classmethod
    def single(cls, original_h, original_w, crop_x=0, crop_y=0, preference=1.0):
        return cls(
            np.asarray([original_h]),
            np.asarray([original_w]),
            np.asarray([crop_x]),
            np.asarray([crop_y]),
            np.asarray([float(preference)]),
        )

    def clamped_preference(self) -> np.ndarray:
        pref = np.asarray(self.preference, dtype=np.float64)
        if not np.all(np.isfinite(pref)):
            raise ValueError("preference score must be finite")
        return np.clip(pref, 0.0, 1.0)


@dataclass
class ConditionBundle:
    """Everything the modulation pathway sees for one batch."""

    pooled_text: T.Tensor
    micro: MicroConditions
    rate_levels: np.ndarray


def rope_tables(positions: np.ndarray, d_head: int, base: float):
    """cos/sin tables [S, d_head/2] for the given integer positions."""
    if d_head % 2:
        raise ValueError(f"rotary head dim must be even, got {d_head}")
    half = d_head // 2
    positions = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-2.0 * np.arange(half) / d_head)
    angles = positions[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(x, positions, base: float):
    """Rotate [..., S, D] coordinate pairs by position-dependent angles."""
    x = T.as_tensor(x)
    cos, sin = rope_tables(positions, x.data.shape[-1], base)
    return T.rope_rotate_pairs(x, cos, sin)


def _split_heads(x, n_heads):
    b, s, d = x.data.shape
    hd = d // n_heads
    return T.transpose(T.reshape(x, (b, s, n_heads, hd)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, s, hd = x.data.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def _attention_core(qh, kh, vh):
    """Scaled dot-product over prepared [B, H, S, hd] heads."""
    hd = qh.data.shape[-1]
    scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
    return T.matmul(T.softmax(scores, axis=-1), vh)


def qk_norm_attention(q, k, v, q_gain, k_gain, cos, sin, n_heads, eps: float = 1e-12):
    """Attention with per-head RMS norm on q/k followed by rotary phases.

    q/k/v are [B, S, D]; cos/sin cover all S positions. Returns [B, S, D]
    (pre output-projection).
    """
    qh = T.rope_rotate_pairs(T.rms_norm(_split_heads(q, n_heads), q_gain, eps), cos, sin)
    kh = T.rope_rotate_pairs(T.rms_norm(_split_heads(k, n_heads), k_gain, eps), cos, sin)
    return _merge_heads(_attention_core(qh, kh, _split_heads(v, n_heads)))


def _chunk_mod(mod, d, count):
    """Split a [B, count*d] modulation tensor into count [B, 1, d] pieces."""
    return [
        T.reshape(T.slice_axis(mod, -1, i * d, (i + 1) * d), (mod.data.shape[0], 1, d))
        for i in range(count)
    ]


def _modulate(x, shift, scale):
    return x * (1.0 + scale) + shift


class _Stream(Module):
    """Per-stream weights of a transformer block (attention + FFN + modulation)."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.d_model
        hd = d // cfg.n_heads
        self.norm1 = LayerNorm(d, affine=False)
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        # Near-zero eps keeps the norm scale-invariant to projection rescaling
        # (the QK-Norm contract); it only guards exactly-zero vectors.
        self.q_norm = RMSNorm(hd, eps=1e-12)
        self.k_norm = RMSNorm(hd, eps=1e-12)
        self.norm2 = LayerNorm(d, affine=False)
        self.fc1 = Linear(d, cfg.ffn_mult * d, rng)
        self.fc2 = Linear(cfg.ffn_mult * d, d, rng)
        self.mod = Linear(cfg.d_cond, 6 * d, rng, zero_init=True)

    def modulation(self, y, d):
        return _chunk_mod(self.mod(y), d, 6)

    def heads(self, x, cos, sin, n_heads):
        """Project to q/k/v heads, apply this stream's QK norm and rotations."""
        q = _split_heads(self.q_proj(x), n_heads)
        k = _split_heads(self.k_proj(x), n_heads)
        v = _split_heads(self.v_proj(x), n_heads)
        q = T.rope_rotate_pairs(self.q_norm(q), cos, sin)
        k = T.rope_rotate_pairs(self.k_norm(k), cos, sin)
        return q, k, v

    def ffn(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class MultiModalBlock(Module):
    """Dual-stream block: separate weights per stream, one joint attention."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.image = _Stream(cfg, rng)
        self.text = _Stream(cfg, rng)

    def __call__(self, img, txt, y, joint_cos, joint_sin):
        if txt is None:
            raise ValueError("multi-modal block requires a text stream")
        cfg = self.cfg
        d = cfg.d_model
        l = txt.data.shape[1]
        i_sh1, i_sc1, i_g1, i_sh2, i_sc2, i_g2 = self.image.modulation(y, d)
        t_sh1, t_sc1, t_g1, t_sh2, t_sc2, t_g2 = self.text.modulation(y, d)

        hi = _modulate(self.image.norm1(img), i_sh1, i_sc1)
        ht = _modulate(self.text.norm1(txt), t_sh1, t_sc1)
        # Each stream normalizes and rotates with its own gains; text takes
        # rotary positions 0..L-1 and the image continues at L..L+N-1.
        qt, kt, vt = self.text.heads(ht, joint_cos[:l], joint_sin[:l], cfg.n_heads)
        qi, ki, vi = self.image.heads(hi, joint_cos[l:], joint_sin[l:], cfg.n_heads)
        ctx = _attention_core(
            T.concat([qt, qi], axis=2), T.concat([kt, ki], axis=2), T.concat([vt, vi], axis=2)
        )
        ctx_t = _merge_heads(T.slice_axis(ctx, 2, 0, l))
        ctx_i = _merge_heads(T.slice_axis(ctx, 2, l, ctx.data.shape[2]))
        img = img + i_g1 * self.image.out(ctx_i)
        txt = txt + t_g1 * self.text.out(ctx_t)

        img = img + i_g2 * self.image.ffn(_modulate(self.image.norm2(img), i_sh2, i_sc2))
        txt = txt + t_g2 * self.text.ffn(_modulate(self.text.norm2(txt), t_sh2, t_sc2))
        return img, txt


class SingleModalBlock(Module):
    """Image-only block with the same modulation pattern."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.image = _Stream(cfg, rng)

    def __call__(self, img, y, cos, sin):
        cfg = self.cfg
        d = cfg.d_model
        sh1, sc1, g1, sh2, sc2, g2 = self.image.modulation(y, d)
        h = _modulate(self.image.norm1(img), sh1, sc1)
        q, k, v = self.image.heads(h, cos, sin, cfg.n_heads)
        ctx = _merge_heads(_attention_core(q, k, v))
        img = img + g1 * self.image.out(ctx)
        img = img + g2 * self.image.ffn(_modulate(self.image.norm2(img), sh2, sc2))
        return img


class Backbone(Module):
    """Full grid-to-logits transformer; counts its forward passes."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        d = cfg.d_model
        self.token_embed = Embedding(cfg.codebook_k + 1, d, rng)
        self.text_proj = Linear(cfg.d_text, d, rng)
        cond_in = cfg.d_text + 6 * cfg.sin_dim
        self.cond_fc1 = Linear(cond_in, cfg.d_cond, rng)
        self.cond_fc2 = Linear(cfg.d_cond, cfg.d_cond, rng)
        if cfg.compression_active:
            self.compress = Conv2d(d, d, 2, rng, stride=2)
            self.decompress = ConvTranspose2d(d, d, 2, rng, stride=2)
        else:
            self.compress = None
            self.decompress = None
        self.mm_blocks = [MultiModalBlock(cfg, rng) for _ in range(cfg.depth_mm)]
        self.sm_blocks = [SingleModalBlock(cfg, rng) for _ in range(cfg.depth_sm)]
        self.final_norm = LayerNorm(d, affine=False)
        self.final_mod = Linear(cfg.d_cond, 2 * d, rng, zero_init=True)
        self.head = Linear(d, cfg.codebook_k, rng)
        self.forward_count = 0
        self._rope_cache = {}

    def _tables(self, l: int):
        ih, iw = self.cfg.inner_grid
        n = ih * iw
        key = (l, n)
        if key not in self._rope_cache:
            hd = self.cfg.d_model // self.cfg.n_heads
            joint = rope_tables(np.arange(l + n), hd, self.cfg.rope_base)
            image = (joint[0][l:], joint[1][l:])
            self._rope_cache[key] = (joint, image)
        return self._rope_cache[key]

    def build_condition(self, bundle: ConditionBundle) -> T.Tensor:
        """Fuse pooled text, micro-conditions, and the rate level into y."""
        cfg = self.cfg
        micro = bundle.micro
        pref = micro.clamped_preference()
        channels = [
            sinusoidal_embed_many(micro.original_h, cfg.sin_dim),
            sinusoidal_embed_many(micro.original_w, cfg.sin_dim),
            sinusoidal_embed_many(micro.crop_x, cfg.sin_dim),
            sinusoidal_embed_many(micro.crop_y, cfg.sin_dim),
            sinusoidal_embed_many(pref * 1000.0, cfg.sin_dim),
            sinusoidal_embed_many(np.asarray(bundle.rate_levels, dtype=np.float64), cfg.sin_dim),
        ]
        stacked = np.concatenate(channels, axis=1)
        if not np.all(np.isfinite(stacked)):
            raise ValueError("non-finite condition channels")
        feats = T.concat(
            [bundle.pooled_text, T.Tensor(stacked, dtype=bundle.pooled_text.data.dtype)],
            axis=-1,
        )
        return self.cond_fc2(T.silu(self.cond_fc1(feats)))

    def __call__(self, indices: np.ndarray, text_seq: T.Tensor, bundle: ConditionBundle) -> T.Tensor:
        """Token indices [B, h, w] -> logits [B, N, K]."""
        cfg = self.cfg
        indices = np.asarray(indices)
        if indices.ndim == 2:
            indices = indices[None]
        b, gh, gw = indices.shape
        if (gh, gw) != (cfg.grid_h, cfg.grid_w):
            raise ValueError(f"grid {gh}x{gw} does not match config {cfg.grid_h}x{cfg.grid_w}")
        if indices.min(initial=0) < 0 or indices.max(initial=0) > cfg.codebook_k:
            raise ValueError(f"token indices must lie in [0, {cfg.codebook_k}]")
        self.forward_count += 1

        x = self.token_embed(indices.reshape(b, gh * gw))
        if self.compress is not None:
            d = cfg.d_model
            x = T.transpose(T.reshape(x, (b, gh, gw, d)), (0, 3, 1, 2))
            x = self.compress(x)
            ih, iw = cfg.inner_grid
            x = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, ih * iw, d))
        y = self.build_condition(bundle)
        txt = self.text_proj(text_seq)
        l = txt.data.shape[1]
        (joint_cos, joint_sin), (img_cos, img_sin) = self._tables(l)
        for block in self.mm_blocks:
            x, txt = block(x, txt, y, joint_cos, joint_sin)
        for block in self.sm_blocks:
            x = block(x, y, img_cos, img_sin)
        sh, sc = _chunk_mod(self.final_mod(y), cfg.d_model, 2)
        x = _modulate(self.final_norm(x), sh, sc)
        if self.decompress is not None:
            d = cfg.d_model
            ih, iw = cfg.inner_grid
            x = T.transpose(T.reshape(x, (b, ih, iw, d)), (0, 3, 1, 2))
            x = self.decompress(x)
            x = T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, gh * gw, d))
        return self.head(x)


class T2IModel(Module):
    """Text encoder + backbone, trained jointly; owns the vocabulary."""

    def __init__(self, model_cfg: ModelConfig, text_cfg: TextConfig, vocab: Vocabulary, rng):
        if text_cfg.d_text != model_cfg.d_text:
            raise ValueError("text encoder width must match backbone d_text")
        if text_cfg.max_len != model_cfg.text_len:
            raise ValueError("text length mismatch between encoder and backbone")
        self.model_cfg = model_cfg
        self.text_cfg = text_cfg
        self.vocab = vocab
        self.text_encoder = TextEncoder(text_cfg, vocab, rng)
        self.backbone = Backbone(model_cfg, rng)

    def forward_ids(self, indices: np.ndarray, caption_ids: np.ndarray,
                    micro: MicroConditions, rate_levels: np.ndarray) -> T.Tensor:
        temb = self.text_encoder(caption_ids)
        bundle = ConditionBundle(temb.pooled, micro, rate_levels)
        return self.backbone(indices, temb.sequence, bundle)

    def forward_with_text(self, indices: np.ndarray, temb, micro: MicroConditions,
                          rate_levels: np.ndarray) -> T.Tensor:
        """Forward with a precomputed text embedding (samplers reuse it per step)."""
        bundle = ConditionBundle(temb.pooled, micro, rate_levels)
        return self.backbone(indices, temb.sequence, bundle)
