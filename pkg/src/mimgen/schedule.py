"""Masking-rate sampling, rate discretization, and decode schedules.

Training draws the masking ratio r from the truncated-arccos density
p(r) = (2/pi) * (1 - r^2)^(-1/2) on [0, 1], whose CDF is
F(r) = (2/pi) * arcsin(r); inverting F gives the exact sampler
r = sin(pi * u / 2) for uniform u. Inference unmasks tokens along the
cosine curve gamma_t = cos(pi * t / (2T)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RATE_LEVELS = 1000


def mask_rate_density(r):
    """Density (2/pi) / sqrt(1 - r^2) of the training masking ratio."""
    r = np.asarray(r, dtype=np.float64)
    return (2.0 / math.pi) / np.sqrt(1.0 - r * r)


def mask_rate_cdf(r):
    """CDF (2/pi) * arcsin(r) of the training masking ratio."""
    return (2.0 / math.pi) * np.arcsin(np.asarray(r, dtype=np.float64))


def discretize(r: float) -> int:
    """Map a rate in [0, 1] to one of RATE_LEVELS integer levels (floor, clamped)."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"rate {r} outside [0, 1]")
    return min(int(r * RATE_LEVELS), RATE_LEVELS - 1)


@dataclass(frozen=True)
class MaskRate:
    """A masking ratio and its discretized condition level."""

    r: float
    level: int

    @classmethod
    def from_rate(cls, r: float) -> "MaskRate":
        if not math.isfinite(r):
            raise ValueError("rate must be finite")
        return cls(r, discretize(r))


def sample_mask_rate(u: float) -> MaskRate:
    """Inverse-CDF draw: uniform u in [0, 1] -> r = sin(pi*u/2)."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"uniform draw {u} outside [0, 1]")
    return MaskRate.from_rate(math.sin(math.pi * u / 2.0))


def sample_mask_rates(rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorized inverse-CDF draws; returns float64 rates in [0, 1]."""
    return np.sin(math.pi * rng.random(n) / 2.0)


@dataclass(frozen=True)
class InferenceSchedule:
    """Per-step unmasking plan for a grid of ``total_tokens`` cells.

    ``masked[t]`` is the number of still-masked cells after step t
    (masked[0] == N, masked[T] == 0); ``unmask[t]`` is the count committed
    at step t+1. Every step commits at least one cell and the counts sum
    to N.
    """

    steps: int
    total_tokens: int
    gammas: np.ndarray
    masked: np.ndarray
    unmask: np.ndarray

    def table(self) -> str:
        """Two-column text table of (t, masked-after-step-t)."""
        return "\n".join(f"{t}\t{int(m)}" for t, m in enumerate(self.masked))


def cosine_schedule(steps: int, total_tokens: int) -> InferenceSchedule:
    """Cosine unmasking schedule: floor(cos(pi*t/2T) * N), repaired so that
    every step commits >= 1 token (surplus taken from the largest step)."""
    t_steps, n = int(steps), int(total_tokens)
    if t_steps < 1:
        raise ValueError("schedule needs at least one step")
    if t_steps > n:
        raise ValueError(
            f"steps ({t_steps}) exceed tokens ({n}); cannot unmask at least one per step"
        )
    ts = np.arange(t_steps + 1, dtype=np.float64)
    gammas = np.cos(math.pi * ts / (2.0 * t_steps))
    masked = np.floor(gammas * n).astype(np.int64)
    masked[0] = n
    masked[-1] = 0
    unmask = masked[:-1] - masked[1:]
    while unmask.min() < 1:
        i = int(np.argmin(unmask))
        j = int(np.argmax(unmask))
        unmask[i] += 1
        unmask[j] -= 1
    masked = n - np.cumsum(np.concatenate(([0], unmask)))
    return InferenceSchedule(t_steps, n, gammas, masked, unmask)


def sinusoidal_embed(value: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features at geometrically spaced frequencies.

    Frequencies run from 1 rad per unit down to 2*pi/max_period, so the
    slowest channel completes one radian at value = max_period / (2*pi).
    """
    return sinusoidal_embed_many(np.asarray([value]), dim, max_period)[0]


def sinusoidal_embed_many(values, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Vectorized ``sinusoidal_embed``; returns [len(values), dim] float64."""
    if dim % 2:
        raise ValueError(f"sinusoidal embedding dim must be even, got {dim}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = np.array([2.0 * math.pi / max_period])
    else:
        exponents = np.arange(half, dtype=np.float64) / (half - 1)
        freqs = (2.0 * math.pi / max_period) ** exponents
    angles = values[:, None] * freqs[None, :]
    out = np.empty((values.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
