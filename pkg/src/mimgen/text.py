"""Toy text encoder: closed vocabulary, 2-layer transformer, mean pooling.

The encoder exposes the same surface a large pretrained text tower would:
an unpooled per-token sequence for cross-attention and a pooled vector for
the condition pathway. Padding tokens are masked out of attention keys and
excluded from the pooled mean, so outputs depend only on content tokens.
A reserved UNCOND sentinel provides the null prompt for guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Embedding, LayerNorm, Linear, Module

PAD_TOKEN = "<pad>"
UNCOND_TOKEN = "<uncond>"
UNK_TOKEN = "<unk>"

# Large negative attention bias; exp() underflows to exactly 0 after the
# softmax max-subtraction, so masked keys contribute nothing at all.
_KEY_MASK_BIAS = -1e9


class Vocabulary:
    """Bijective token <-> id table with PAD/UNCOND/UNK sentinels."""

    def __init__(self, words):
        tokens = [PAD_TOKEN, UNCOND_TOKEN, UNK_TOKEN] + sorted(set(words))
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary words collide with reserved sentinels")
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        self.id_to_token = tokens

    def __len__(self):
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD_TOKEN]

    @property
    def uncond_id(self) -> int:
        return self.token_to_id[UNCOND_TOKEN]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK_TOKEN]

    def to_manifest(self) -> dict:
        return dict(sorted(self.token_to_id.items()))

    @classmethod
    def from_manifest(cls, table: dict) -> "Vocabulary":
        vocab = cls.__new__(cls)
        ordered = sorted(table.items(), key=lambda kv: kv[1])
        if [i for _, i in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids must be a dense 0..V-1 range")
        vocab.token_to_id = dict(ordered)
        vocab.id_to_token = [tok for tok, _ in ordered]
        return vocab


def tokenize(caption: str, vocab: Vocabulary, max_len: int = 16) -> np.ndarray:
    """Lowercase whitespace tokenization, padded/truncated to ``max_len``."""
    ids = [vocab.token_to_id.get(w, vocab.unk_id) for w in caption.lower().split()]
    ids = ids[:max_len]
    ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


@dataclass
class TextConfig:
    vocab_size: int
    d_text: int = 128
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 16
    ffn_mult: int = 2

    def __post_init__(self):
        if self.d_text % self.n_heads:
            raise ValueError("d_text must divide evenly into heads")


@dataclass
class TextEmbedding:
    """Unpooled sequence [B, L, D], pooled mean [B, D], and content flags."""

    sequence: T.Tensor
    pooled: T.Tensor
    content: np.ndarray = field(repr=False)


class _TextBlock(Module):
    def __init__(self, cfg: TextConfig, rng):
        d = cfg.d_text
        self.ln1 = LayerNorm(d)
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, cfg.ffn_mult * d, rng)
        self.fc2 = Linear(cfg.ffn_mult * d, d, rng)
        self.n_heads = cfg.n_heads

    def __call__(self, x, key_bias):
        b, l, d = x.data.shape
        h = self.n_heads
        hd = d // h
        normed = self.ln1(x)

        def split(t):
            return T.transpose(T.reshape(t, (b, l, h, hd)), (0, 2, 1, 3))

        q, k, v = split(self.q_proj(normed)), split(self.k_proj(normed)), split(self.v_proj(normed))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        scores = scores + T.Tensor(key_bias, dtype=x.data.dtype)
        attn = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, l, d))
        x = x + self.out(ctx)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


class TextEncoder(Module):
    """2-layer transformer over learned token + position embeddings."""

    def __init__(self, cfg: TextConfig, vocab: Vocabulary, rng):
        if len(vocab) != cfg.vocab_size:
            raise ValueError("config vocab_size does not match vocabulary")
        self.cfg = cfg
        self.vocab = vocab
        self.tok_embed = Embedding(cfg.vocab_size, cfg.d_text, rng)
        self.pos_embed = Embedding(cfg.max_len, cfg.d_text, rng)
        self.blocks = [_TextBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_final = LayerNorm(cfg.d_text)

    def __call__(self, ids: np.ndarray) -> TextEmbedding:
        ids = np.atleast_2d(np.asarray(ids))
        b, l = ids.shape
        if l > self.cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds max_len {self.cfg.max_len}")
        content = ids != self.vocab.pad_id
        x = self.tok_embed(ids) + self.pos_embed(np.broadcast_to(np.arange(l), (b, l)))
        key_bias = np.where(content, 0.0, _KEY_MASK_BIAS)[:, None, None, :]
        for block in self.blocks:
            x = block(x, key_bias)
        x = self.ln_final(x)
        # Mean over content positions; an all-PAD row falls back to all positions.
        flags = content.astype(np.float64)
        counts = flags.sum(axis=1)
        empty = counts == 0
        if empty.any():
            flags[empty] = 1.0
            counts = flags.sum(axis=1)
        weights = (flags / counts[:, None])[:, :, None]
        pooled = T.tsum(x * T.Tensor(weights, dtype=x.data.dtype), axis=1)
        return TextEmbedding(x, pooled, content)

    def null_ids(self) -> np.ndarray:
        ids = np.full(self.cfg.max_len, self.vocab.pad_id, dtype=np.int64)
        ids[0] = self.vocab.uncond_id
        return ids

    def null_embedding(self) -> TextEmbedding:
        """Encoding of the UNCOND sentinel sequence."""
        return self(self.null_ids()[None, :])
