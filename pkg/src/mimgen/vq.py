"""Vector-quantized image autoencoder producing discrete token grids.

The encoder is a strided conv stack (one stride-2 stage per factor of 2 in
the downsampling ratio) with a residual block; the decoder mirrors it with
stride-2 transposed convolutions. All spatial convs use replicate padding,
so a constant-color image maps to a spatially constant latent field and
therefore to a single repeated token.

Quantization snaps each latent vector to its nearest codebook entry by
Euclidean distance (ties: lowest index). Gradients pass straight through
the quantizer to the encoder; the codebook learns from the codebook loss
||sg(z) - e||^2 plus the commitment term beta * ||z - sg(e)||^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DivergenceError
from .nn import AdamW, Conv2d, ConvTranspose2d, Module, clip_global_norm, normal_param


def token_count(image_h: int, image_w: int, f: int) -> int:
    """Number of tokens for an image of the given pixel extents."""
    if image_h % f or image_w % f:
        raise ValueError(f"extents {image_h}x{image_w} not divisible by f={f}")
    return (image_h // f) * (image_w // f)


@dataclass
class VqConfig:
    image_size: int = 32
    downsample_f: int = 4
    codebook_k: int = 256
    embed_d: int = 64
    commitment_beta: float = 0.25
    base_channels: int = 32

    def __post_init__(self):
        if self.downsample_f not in (2, 4, 8, 16):
            raise ValueError(f"downsample_f must be one of 2/4/8/16, got {self.downsample_f}")
        if self.image_size % self.downsample_f:
            raise ValueError("image_size must be divisible by downsample_f")
        if self.codebook_k < 2:
            raise ValueError("codebook needs at least 2 entries")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.downsample_f


@dataclass
class TokenGrid:
    """2-D grid of codebook indices; index == mask_index marks a masked cell."""

    indices: np.ndarray
    mask_index: int
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("token grid must be 2-D")
        if self.mask is None:
            self.mask = self.indices == self.mask_index
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        self.validate()

    def validate(self):
        if self.indices.min(initial=0) < 0 or self.indices.max(initial=0) > self.mask_index:
            raise ValueError(f"indices outside [0, {self.mask_index}]")
        if not np.array_equal(self.mask, self.indices == self.mask_index):
            raise ValueError("mask flags inconsistent with mask_index cells")

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.indices.copy(), self.mask_index)

    def masked_count(self) -> int:
        return int(self.mask.sum())


class Codebook(Module):
    """K x D learned entries plus a usage histogram diagnostic."""

    def __init__(self, k: int, d: int, rng):
        self.entries = normal_param(rng, (k, d), 1.0)
        self.usage_counts = np.zeros(k, dtype=np.int64)

    @property
    def k(self) -> int:
        return self.entries.data.shape[0]

    def nearest(self, flat: np.ndarray) -> np.ndarray:
        """Nearest entry per row of [M, D]; ties resolve to the lowest index."""
        e = self.entries.data
        if e.shape[0] == 0:
            raise ValueError("empty codebook")
        d2 = (
            (flat * flat).sum(axis=1, keepdims=True)
            - 2.0 * flat @ e.T
            + (e * e).sum(axis=1)[None, :]
        )
        return np.argmin(d2, axis=1)


class _ResBlock(Module):
    def __init__(self, ch, rng, pad_mode):
        self.conv1 = Conv2d(ch, ch, 3, rng, pad=1, pad_mode=pad_mode)
        self.conv2 = Conv2d(ch, ch, 3, rng, pad=1, pad_mode=pad_mode)

    def __call__(self, x):
        h = self.conv2(T.gelu(self.conv1(T.gelu(x))))
        return x + h


class VqTokenizer(Module):
    """Trainable encoder/quantizer/decoder over [B, 3, H, W] images in [0, 1]."""

    PAD_MODE = "edge"

    def __init__(self, cfg: VqConfig, rng):
        self.cfg = cfg
        stages = int(math.log2(cfg.downsample_f))
        chans = [cfg.base_channels * (2 ** i) for i in range(stages)]
        self.enc_downs = []
        cin = 3
        for ch in chans:
            self.enc_downs.append(Conv2d(cin, ch, 4, rng, stride=2, pad=1, pad_mode=self.PAD_MODE))
            cin = ch
        self.enc_res = _ResBlock(cin, rng, self.PAD_MODE)
        self.enc_out = Conv2d(cin, cfg.embed_d, 1, rng)
        self.codebook = Codebook(cfg.codebook_k, cfg.embed_d, rng)
        self.dec_in = Conv2d(cfg.embed_d, cin, 1, rng)
        self.dec_res = _ResBlock(cin, rng, self.PAD_MODE)
        self.dec_ups = []
        self.dec_convs = []
        for ch in reversed(chans[:-1]):
            self.dec_ups.append(ConvTranspose2d(cin, ch, 2, rng, stride=2))
            self.dec_convs.append(Conv2d(ch, ch, 3, rng, pad=1, pad_mode=self.PAD_MODE))
            cin = ch
        self.dec_ups.append(ConvTranspose2d(cin, cin, 2, rng, stride=2))
        self.dec_convs.append(Conv2d(cin, cin, 3, rng, pad=1, pad_mode=self.PAD_MODE))
        self.dec_out = Conv2d(cin, 3, 3, rng, pad=1, pad_mode=self.PAD_MODE)

    # -- graph-building pieces used by training ---------------------------

    def encode_latents(self, images: T.Tensor) -> T.Tensor:
        h = images
        for down in self.enc_downs:
            h = T.gelu(down(h))
        h = self.enc_res(h)
        return self.enc_out(h)

    def decode_latents(self, zq: T.Tensor) -> T.Tensor:
        h = self.dec_res(self.dec_in(zq))
        for up, conv in zip(self.dec_ups, self.dec_convs):
            h = T.gelu(conv(T.gelu(up(h))))
        return self.dec_out(h)

    def quantize(self, latents: T.Tensor):
        """Snap latents to nearest entries.

        Returns (grids, straight-through quantized latents, loss dict).
        """
        b, d, gh, gw = latents.data.shape
        if d != self.cfg.embed_d:
            raise ValueError(f"latent width {d} != codebook width {self.cfg.embed_d}")
        flat_t = T.reshape(T.transpose(latents, (0, 2, 3, 1)), (b * gh * gw, d))
        idx = self.codebook.nearest(flat_t.data)
        entries = T.embedding(self.codebook.entries, idx)
        codebook_loss = T.tmean((entries - flat_t.detach()) * (entries - flat_t.detach()))
        commit_loss = self.cfg.commitment_beta * T.tmean(
            (entries.detach() - flat_t) * (entries.detach() - flat_t)
        )
        # Straight-through: forward uses the entry, backward sees identity.
        zq_flat = flat_t + (entries - flat_t).detach()
        zq = T.transpose(T.reshape(zq_flat, (b, gh, gw, d)), (0, 3, 1, 2))
        grids = [
            TokenGrid(idx.reshape(b, gh, gw)[i], self.cfg.codebook_k) for i in range(b)
        ]
        losses = {"codebook": codebook_loss, "commitment": commit_loss}
        return grids, zq, losses

    # -- public numpy-facing API -------------------------------------------

    def encode_image(self, images: np.ndarray) -> list:
        """Images [B, 3, H, W] (or single [3, H, W]) in [0, 1] -> TokenGrids."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        if images.min(initial=0.0) < 0.0 or images.max(initial=0.0) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if images.shape[2] % self.cfg.downsample_f or images.shape[3] % self.cfg.downsample_f:
            raise ValueError("image extents must be divisible by the downsampling factor")
        with T.no_grad():
            latents = self.encode_latents(T.Tensor(images))
            grids, _, _ = self.quantize(latents)
        for g in grids:
            np.add.at(self.codebook.usage_counts, g.indices.reshape(-1), 1)
        return grids

    def decode_tokens(self, grids) -> np.ndarray:
        """Complete TokenGrid(s) -> images [B, 3, H, W] clamped to [0, 1]."""
        single = isinstance(grids, TokenGrid)
        if single:
            grids = [grids]
        for g in grids:
            if g.masked_count():
                raise ValueError("cannot decode a grid with masked cells")
        idx = np.stack([g.indices for g in grids])
        b, gh, gw = idx.shape
        with T.no_grad():
            entries = T.embedding(self.codebook.entries, idx.reshape(-1))
            zq = T.transpose(
                T.reshape(entries, (b, gh, gw, self.cfg.embed_d)), (0, 3, 1, 2)
            )
            out = self.decode_latents(zq)
        images = np.clip(out.data, 0.0, 1.0).astype(np.float32)
        return images[0] if single else images

    def reconstruction_mse(self, images: np.ndarray) -> float:
        grids = self.encode_image(images)
        recon = self.decode_tokens(grids)
        if recon.ndim == 3:
            recon = recon[None]
        ref = np.asarray(images, dtype=np.float32)
        if ref.ndim == 3:
            ref = ref[None]
        return float(((recon - ref) ** 2).mean())


def _all_latents(tok: VqTokenizer, images: np.ndarray) -> np.ndarray:
    chunks = []
    with T.no_grad():
        for lo in range(0, images.shape[0], 32):
            latents = tok.encode_latents(T.Tensor(images[lo : lo + 32])).data
            chunks.append(np.transpose(latents, (0, 2, 3, 1)).reshape(-1, tok.cfg.embed_d))
    return np.concatenate(chunks)


def _init_codebook_kmeans(tok: VqTokenizer, images: np.ndarray, seed: int):
    """Seed the codebook with k-means centroids of the warmed encoder's latents.

    Codebook entries only receive gradient while assigned, so spreading them
    over the real latent clusters at initialization is what keeps a healthy
    fraction of the codebook in use (there is no dead-code rescue later).
    Tiny corpora can have fewer distinct latents than entries; those fill the
    table directly, jittered duplicates taking the remainder.
    """
    import warnings

    from scipy.cluster.vq import kmeans2

    flat = _all_latents(tok, images).astype(np.float64)
    k = tok.cfg.codebook_k
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2))))
    distinct = np.unique(flat, axis=0)
    if distinct.shape[0] <= k:
        reps = rng.integers(0, distinct.shape[0], size=k - distinct.shape[0])
        extra = distinct[reps] + 0.01 * rng.normal(size=(len(reps), flat.shape[1]))
        centers = np.concatenate([distinct, extra])
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centers, _ = kmeans2(flat, k, minit="++", seed=seed, iter=8)
        bad = ~np.isfinite(centers).all(axis=1)
        if bad.any():
            centers[bad] = distinct[rng.integers(0, distinct.shape[0], size=int(bad.sum()))]
    tok.codebook.entries.data = centers.astype(np.float32)


def train_tokenizer(
    images: np.ndarray,
    cfg: VqConfig,
    steps: int,
    *,
    batch_size: int = 16,
    lr: float = 2e-3,
    warmup_frac: float = 0.2,
    seed: int = 0,
    log_path=None,
    heldout: np.ndarray = None,
):
    """Train a tokenizer on [N, 3, H, W] images; returns (tokenizer, metrics).

    The first ``warmup_frac`` of the steps train encoder and decoder as a
    plain autoencoder; the codebook is then initialized by k-means over the
    warmed latents and the remaining steps train through the quantizer.
    Metrics carry the loss curve, the final codebook-usage histogram, and
    the held-out reconstruction MSE when a held-out set is given. A
    non-finite loss aborts with a diagnostic.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("training set must be a nonempty [N, 3, H, W] array")
    init_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0))))
    data_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1))))
    tok = VqTokenizer(cfg, init_rng)
    opt = AdamW(tok.params(), lr=lr)
    warmup = int(steps * warmup_frac)
    curve = []
    for step in range(steps):
        # Cosine decay to 5% of the peak rate; late-phase jitter is what
        # keeps re-encoding trained images from being token-stable.
        opt.lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * step / max(steps, 1))))
        if step == warmup:
            _init_codebook_kmeans(tok, images, seed)
        picks = data_rng.integers(0, images.shape[0], size=min(batch_size, images.shape[0]))
        batch = T.Tensor(images[picks])
        latents = tok.encode_latents(batch)
        if step < warmup:
            recon = tok.decode_latents(latents)
            recon_loss = T.tmean((recon - batch) * (recon - batch))
            loss = recon_loss
        else:
            _, zq, losses = tok.quantize(latents)
            recon = tok.decode_latents(zq)
            recon_loss = T.tmean((recon - batch) * (recon - batch))
            loss = recon_loss + losses["codebook"] + losses["commitment"]
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite tokenizer loss at step {step}")
        tok.zero_grad()
        loss.backward()
        clip_global_norm(opt.params, 1.0)
        opt.step()
        curve.append((step, float(recon_loss.data), value - float(recon_loss.data)))
    tok.codebook.usage_counts[:] = 0
    tok.encode_image(images)  # refresh the usage histogram on the training set
    usage = tok.codebook.usage_counts.copy()
    metrics = {
        "curve": curve,
        "usage": usage,
        "codes_used": int((usage > 0).sum()),
        "train_mse": tok.reconstruction_mse(images),
    }
    if heldout is not None:
        metrics["heldout_mse"] = tok.reconstruction_mse(heldout)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step,recon_mse,vq_loss\n")
            for step, rec, vq_part in curve:
                fh.write(f"{step},{rec:.6f},{vq_part:.6f}\n")
            fh.write(f"# codes_used={metrics['codes_used']}/{cfg.codebook_k}\n")
            fh.write(f"# train_mse={metrics['train_mse']:.6f}\n")
            if heldout is not None:
                fh.write(f"# heldout_mse={metrics['heldout_mse']:.6f}\n")
    return tok, metrics
