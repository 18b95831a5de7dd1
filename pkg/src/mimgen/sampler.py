"""Parallel iterative decoding with classifier-free guidance.

Generation starts from a fully masked grid. Each step runs the backbone
twice (caption and null prompt), mixes the logits g = u + s*(c - u),
draws a candidate token for every masked cell (argmax when temperature is
zero), and commits the schedule's quota of cells in order of decreasing
confidence, where confidence is the mixed-softmax probability of the
candidate. Committed cells are never revisited; the rest stay masked for
the next step. The rate condition fed to the model at every step is the
realized masked fraction of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import MicroConditions, T2IModel
from .schedule import InferenceSchedule, cosine_schedule, discretize
from .text import tokenize
from .vq import TokenGrid, VqTokenizer


@dataclass
class SamplerConfig:
    steps: int = 48
    guidance: float = 9.0
    temperature: float = 1.0
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule kind {self.schedule!r}")


@dataclass
class StepRecord:
    step: int
    masked_before: int
    committed: np.ndarray
    min_confidence: float


@dataclass
class DecodeTrace:
    records: list = field(default_factory=list)
    forward_passes: int = 0

    def csv_lines(self):
        yield "step,masked_before,committed,min_confidence"
        for r in self.records:
            yield f"{r.step},{r.masked_before},{len(r.committed)},{r.min_confidence:.6f}"


@dataclass
class GenerateResult:
    image: np.ndarray
    grid: TokenGrid
    trace: DecodeTrace


def cfg_mix(cond: np.ndarray, uncond: np.ndarray, scale: float) -> np.ndarray:
    """g = u + s*(c - u); exact copies at the s=0 and s=1 identities."""
    cond, uncond = np.asarray(cond), np.asarray(uncond)
    if cond.shape != uncond.shape:
        raise ValueError(f"cfg_mix shape mismatch: {cond.shape} vs {uncond.shape}")
    if scale == 0.0:
        return uncond.copy()
    if scale == 1.0:
        return cond.copy()
    return uncond + scale * (cond - uncond)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def decode_step(model: T2IModel, grid: TokenGrid, temb, null_temb,
                micro: MicroConditions, schedule: InferenceSchedule, t: int,
                rng: np.random.Generator, config: SamplerConfig) -> StepRecord:
    """Run step ``t`` (1-based) of the schedule, committing cells in place."""
    if t < 1 or t > schedule.steps:
        raise ValueError(f"step {t} outside schedule of {schedule.steps} steps")
    n_total = grid.indices.size
    flat_mask = grid.mask.reshape(-1)
    masked_pos = np.flatnonzero(flat_mask)
    if masked_pos.size != schedule.masked[t - 1]:
        raise ValueError(
            f"grid has {masked_pos.size} masked cells, schedule expects {schedule.masked[t - 1]}"
        )
    level = discretize(masked_pos.size / n_total)
    levels = np.asarray([level], dtype=np.int64)
    indices = grid.indices[None, :, :]
    with T.no_grad():
        cond = model.forward_with_text(indices, temb, micro, levels).data[0]
        uncond = model.forward_with_text(indices, null_temb, micro, levels).data[0]
    mixed = cfg_mix(cond, uncond, config.guidance)
    rows = mixed[masked_pos].astype(np.float64)
    probs = _softmax_rows(rows)
    if config.temperature == 0.0:
        sampled = probs.argmax(axis=1)
    else:
        tempered = _softmax_rows(rows / config.temperature)
        draws = rng.random(masked_pos.size)
        cum = np.cumsum(tempered, axis=1)
        sampled = np.minimum((cum < draws[:, None]).sum(axis=1), probs.shape[1] - 1)
    confidence = probs[np.arange(masked_pos.size), sampled]
    # Stable sort on -confidence: ties resolve to the lower flattened position.
    order = np.argsort(-confidence, kind="stable")
    quota = int(schedule.unmask[t - 1])
    chosen = order[:quota]
    cells = masked_pos[chosen]
    grid.indices.reshape(-1)[cells] = sampled[chosen]
    grid.mask.reshape(-1)[cells] = False
    return StepRecord(t, int(masked_pos.size), cells, float(confidence[chosen].min()))


def decode_loop(model: T2IModel, grid: TokenGrid, temb, null_temb,
                micro: MicroConditions, schedule: InferenceSchedule,
                rng: np.random.Generator, config: SamplerConfig) -> DecodeTrace:
    """Drive ``decode_step`` over the whole schedule; mutates ``grid``."""
    trace = DecodeTrace()
    start = model.backbone.forward_count
    for t in range(1, schedule.steps + 1):
        trace.records.append(
            decode_step(model, grid, temb, null_temb, micro, schedule, t, rng, config)
        )
    trace.forward_passes = model.backbone.forward_count - start
    return trace


def generate(model: T2IModel, tokenizer: VqTokenizer, caption: str,
             config: SamplerConfig, *, micro: MicroConditions = None) -> GenerateResult:
    """Caption -> image, decoding a fully masked grid over ``config.steps``."""
    cfg = model.model_cfg
    ids = tokenize(caption, model.vocab, cfg.text_len)
    with T.no_grad():
        temb = model.text_encoder(ids[None, :])
        null_temb = model.text_encoder.null_embedding()
    if micro is None:
        f = tokenizer.cfg.downsample_f
        micro = MicroConditions.single(cfg.grid_h * f, cfg.grid_w * f)
    schedule = cosine_schedule(config.steps, cfg.n_tokens)
    grid = TokenGrid(
        np.full((cfg.grid_h, cfg.grid_w), cfg.codebook_k, dtype=np.int64), cfg.codebook_k
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((config.seed, 21))))
    trace = decode_loop(model, grid, temb, null_temb, micro, schedule, rng, config)
    if grid.masked_count():
        raise RuntimeError("decode loop terminated with masked cells remaining")
    image = tokenizer.decode_tokens(grid)
    return GenerateResult(image, grid, trace)
