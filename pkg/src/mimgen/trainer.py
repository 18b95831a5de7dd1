"""Masked-token training loop with guidance dropout and gradient clipping.

Each batch item draws its own masking ratio from the truncated-arccos
density, hides that fraction of grid cells (at least one), and the model
predicts the hidden tokens from the visible remainder plus the caption.
With probability ``cond_dropout_p`` an item's caption is replaced by the
UNCOND sentinel so the unconditional branch needed for classifier-free
guidance gets trained. Loss is mean cross-entropy over masked cells only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import MicroConditions, ModelConfig, T2IModel
from .errors import DivergenceError
from .nn import AdamW, clip_global_norm
from .schedule import MaskRate, discretize, sample_mask_rate
from .text import TextConfig, Vocabulary, tokenize


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-4
    cond_dropout_p: float = 0.1
    grad_clip_norm: float = 1.0
    seed: int = 0
    target_loss: float = None
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")


@dataclass
class TrainItem:
    """One tokenized training pair."""

    indices: np.ndarray
    caption_ids: np.ndarray
    original_h: int
    original_w: int


@dataclass
class TrainBatch:
    truth: np.ndarray           # [B, h, w] ground-truth indices
    masked: np.ndarray          # [B, h, w] with mask_index at hidden cells
    mask: np.ndarray            # [B, h, w] bool, True where hidden
    rates: list                 # per-item drawn MaskRate
    caption_ids: np.ndarray     # [B, L], null sequence where dropped
    nulled: np.ndarray          # [B] bool
    micro: MicroConditions
    rate_levels: np.ndarray     # [B] realized-fraction levels fed to the model


def make_batch(items, rng: np.random.Generator, *, mask_index: int, null_ids: np.ndarray,
               cond_dropout_p: float, preference_range=(0.5, 1.0)) -> TrainBatch:
    """Assemble a batch: draw rates, hide cells, maybe null the caption."""
    if not items:
        raise ValueError("empty batch")
    gh, gw = items[0].indices.shape
    n = gh * gw
    if n == 0:
        raise ValueError("zero-token grids cannot be masked")
    truth = np.stack([it.indices for it in items])
    masked = truth.copy()
    mask = np.zeros_like(truth, dtype=bool)
    rates, levels = [], []
    for i, _ in enumerate(items):
        rate = sample_mask_rate(rng.random())
        count = max(1, round(rate.r * n))
        cells = rng.choice(n, size=count, replace=False)
        flat_mask = mask[i].reshape(-1)
        flat_mask[cells] = True
        masked[i].reshape(-1)[cells] = mask_index
        rates.append(rate)
        levels.append(discretize(count / n))
    caption_ids = np.stack([it.caption_ids for it in items])
    nulled = rng.random(len(items)) < cond_dropout_p
    caption_ids[nulled] = null_ids
    micro = MicroConditions(
        original_h=np.asarray([it.original_h for it in items]),
        original_w=np.asarray([it.original_w for it in items]),
        crop_x=np.zeros(len(items), dtype=np.int64),
        crop_y=np.zeros(len(items), dtype=np.int64),
        preference=rng.uniform(*preference_range, size=len(items)),
    )
    return TrainBatch(truth, masked, mask, rates, caption_ids, nulled, micro,
                      np.asarray(levels, dtype=np.int64))


def masked_ce_loss(logits: T.Tensor, truth: np.ndarray, mask: np.ndarray) -> T.Tensor:
    """Mean cross-entropy over masked cells; unmasked cells contribute nothing."""
    b, n, k = logits.data.shape
    flat_logits = T.reshape(logits, (b * n, k))
    targets = np.asarray(truth).reshape(-1)
    weights = np.asarray(mask, dtype=flat_logits.data.dtype).reshape(-1)
    if not weights.any():
        raise ValueError("masked_ce_loss requires at least one masked cell")
    return T.cross_entropy_from_logits(flat_logits, targets, weights)


def train_step(model: T2IModel, batch: TrainBatch, opt: AdamW, clip_norm: float,
               replay_path=None):
    """One optimization step; returns (loss, pre-clip gradient norm)."""
    logits = model.forward_ids(batch.masked, batch.caption_ids, batch.micro,
                               batch.rate_levels)
    b, gh, gw = batch.truth.shape
    loss = masked_ce_loss(logits, batch.truth.reshape(b, gh * gw),
                          batch.mask.reshape(b, gh * gw))
    value = float(loss.data)
    if not np.isfinite(value):
        path = None
        if replay_path is not None:
            np.savez(replay_path, truth=batch.truth, masked=batch.masked,
                     mask=batch.mask, caption_ids=batch.caption_ids,
                     nulled=batch.nulled, rate_levels=batch.rate_levels)
            path = str(replay_path)
        raise DivergenceError(f"non-finite loss {value}", replay_path=path)
    model.zero_grad()
    loss.backward()
    pre_clip = clip_global_norm(opt.params, clip_norm)
    opt.step()
    return value, pre_clip


def build_model(model_cfg: ModelConfig, vocab: Vocabulary, seed: int) -> T2IModel:
    text_cfg = TextConfig(vocab_size=len(vocab), d_text=model_cfg.d_text,
                          max_len=model_cfg.text_len)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 10))))
    return T2IModel(model_cfg, text_cfg, vocab, rng)


def items_from_grids(grids, captions, vocab: Vocabulary, image_size: int,
                     max_len: int = 16):
    """Pair encoded token grids with tokenized captions."""
    items = []
    for grid, cap in zip(grids, captions):
        items.append(TrainItem(grid.indices.copy(), tokenize(cap, vocab, max_len),
                               image_size, image_size))
    return items


@dataclass
class TrainMetrics:
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    nulled_batches: int = 0
    steps_run: int = 0
    final_window_mean: float = float("nan")

    def window_mean(self, window: int = 50) -> float:
        if not self.losses:
            return float("nan")
        return float(np.mean(self.losses[-window:]))

    def log_lines(self):
        for i, (loss, norm) in enumerate(zip(self.losses, self.grad_norms)):
            yield f"{i},{loss:.6f},{norm:.6f}"


def train_t2i(items, train_cfg: TrainConfig, model_cfg: ModelConfig,
              vocab: Vocabulary, *, model: T2IModel = None, log_path=None,
              replay_dir=None):
    """Train (or continue training) a text-to-image model on tokenized pairs.

    Stops early once the mean loss over the trailing 50-step window drops
    below ``train_cfg.target_loss`` (the per-step loss swings with the drawn
    masking rates, so a pointwise test would stop far too early). Returns
    (model, TrainMetrics).
    """
    if not items:
        raise ValueError("empty dataset")
    if model is None:
        model = build_model(model_cfg, vocab, train_cfg.seed)
    data_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((train_cfg.seed, 11)))
    )
    opt = AdamW(model.params(), lr=train_cfg.lr)
    null_ids = model.text_encoder.null_ids()
    metrics = TrainMetrics()
    replay_path = None if replay_dir is None else f"{replay_dir}/diverged_batch.npz"
    for step in range(train_cfg.steps):
        picks = data_rng.integers(0, len(items), size=train_cfg.batch_size)
        batch = make_batch([items[i] for i in picks], data_rng,
                           mask_index=model_cfg.codebook_k, null_ids=null_ids,
                           cond_dropout_p=train_cfg.cond_dropout_p)
        metrics.nulled_batches += int(batch.nulled.any())
        loss, norm = train_step(model, batch, opt, train_cfg.grad_clip_norm,
                                replay_path=replay_path)
        metrics.losses.append(loss)
        metrics.grad_norms.append(norm)
        metrics.steps_run = step + 1
        if (
            train_cfg.target_loss is not None
            and step >= 49
            and metrics.window_mean(50) < train_cfg.target_loss
        ):
            break
    metrics.final_window_mean = metrics.window_mean(50)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step,loss,grad_norm\n")
            for line in metrics.log_lines():
                fh.write(line + "\n")
    return model, metrics
