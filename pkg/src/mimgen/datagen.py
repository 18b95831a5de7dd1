"""Deterministic procedural corpus: flat-shaded shapes with template captions.

Rasterization is integer-only and anti-aliasing free, so renders are
bit-identical across platforms and the tokenizer sees crisp two-color
images. The full spec lattice has 3 shapes x 8 fills x 7 backgrounds x
5 positions x 2 sizes = 1680 distinct scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "orange": (255, 128, 0),
    "white": (255, 255, 255),
}
COLORS = tuple(PALETTE)

# Position name -> center in quarters of the image side.
POSITIONS = {
    "center": (2, 2),
    "top-left": (1, 1),
    "top-right": (1, 3),
    "bottom-left": (3, 1),
    "bottom-right": (3, 3),
}

SIZES = ("small", "large")

# Radius as a fraction of the image side (numerator over 32).
_RADIUS_NUM = {"small": 3, "large": 7}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    fill: str
    background: str
    position: str
    size: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.fill not in PALETTE or self.background not in PALETTE:
            raise ValueError(f"unknown color in {self.fill!r}/{self.background!r}")
        if self.fill == self.background:
            raise ValueError("fill and background must differ")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")


def all_specs() -> list:
    """The full lattice in a fixed deterministic order."""
    out = []
    for shape in SHAPES:
        for fill in COLORS:
            for background in COLORS:
                if background == fill:
                    continue
                for position in POSITIONS:
                    for size in SIZES:
                        out.append(SceneSpec(shape, fill, background, position, size))
    return out


def shape_mask(spec: SceneSpec, image_size: int) -> np.ndarray:
    """Boolean [H, W] coverage of the shape, integer arithmetic only."""
    s = image_size
    qy, qx = POSITIONS[spec.position]
    cy, cx = qy * s // 4, qx * s // 4
    r = _RADIUS_NUM[spec.size] * s // 32
    yy, xx = np.mgrid[0:s, 0:s]
    dy, dx = yy - cy, xx - cx
    if spec.shape == "circle":
        return dy * dy + dx * dx <= r * r
    if spec.shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    # Upward triangle: apex at cy - r, base at cy + r spanning cx +- r.
    inside_rows = (dy >= -r) & (dy <= r)
    halfwidth = (dy + r) * r // (2 * r)
    return inside_rows & (np.abs(dx) <= halfwidth)


def render(spec: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Rasterize to a float32 [3, H, W] image with values in [0, 1]."""
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")
    mask = shape_mask(spec, image_size)
    fill = np.array(PALETTE[spec.fill], dtype=np.float32) / 255.0
    background = np.array(PALETTE[spec.background], dtype=np.float32) / 255.0
    img = np.where(mask[None, :, :], fill[:, None, None], background[:, None, None])
    return np.ascontiguousarray(img, dtype=np.float32)


def caption(spec: SceneSpec) -> str:
    return (
        f"a {spec.size} {spec.fill} {spec.shape} at the {spec.position} "
        f"on a {spec.background} background"
    )


def caption_words() -> list:
    """Every word the caption template can emit, for vocabulary construction."""
    words = {"a", "at", "the", "on", "background"}
    words.update(SHAPES)
    words.update(COLORS)
    words.update(POSITIONS)
    words.update(SIZES)
    return sorted(words)


@dataclass(frozen=True)
class CorpusItem:
    image: np.ndarray
    caption: str
    spec: SceneSpec


def make_corpus(n: int, seed: int, image_size: int = 32) -> list:
    """Sample n distinct scenes without replacement, deterministically."""
    specs = all_specs()
    if n > len(specs):
        raise ValueError(f"requested {n} scenes but only {len(specs)} exist")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(specs))[:n]
    return [
        CorpusItem(render(specs[i], image_size), caption(specs[i]), specs[i]) for i in order
    ]
