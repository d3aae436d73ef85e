"""Synthetic shapes dataset: one colored shape per image, three attribute
tokens per scene (shape, color, quadrant) drawn from a 10-entry vocabulary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import DATA_STREAM, JITTER_STREAM, philox

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
QUADRANTS = ("tl", "tr", "bl", "br")

TOKEN_NAMES = SHAPES + COLORS + QUADRANTS
VOCAB_SIZE = len(TOKEN_NAMES)

_COLOR_OFFSET = len(SHAPES)
_QUADRANT_OFFSET = len(SHAPES) + len(COLORS)


@dataclass(frozen=True)
class Scene:
    shape: str
    color: str
    quadrant: str
    jitter_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.quadrant not in QUADRANTS:
            raise ValueError(f"unknown quadrant {self.quadrant!r}")

    def token_ids(self) -> tuple[int, int, int]:
        return (
            SHAPES.index(self.shape),
            _COLOR_OFFSET + COLORS.index(self.color),
            _QUADRANT_OFFSET + QUADRANTS.index(self.quadrant),
        )


def token_name(token_id: int) -> str:
    return TOKEN_NAMES[token_id]


def _quadrant_origin(quadrant: str, size: int) -> tuple[int, int]:
    half = size // 2
    row = 0 if quadrant in ("tl", "tr") else half
    col = 0 if quadrant in ("tl", "bl") else half
    return row, col


def render(scene: Scene, size: int = 32) -> np.ndarray:
    """Rasterize a scene to a [3, size, size] image with values in [-1, 1].

    Background is -1 everywhere; the shape sets its color channel to +1.
    Deterministic given the scene (position jitter comes from jitter_seed).
    """
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    rng = philox(scene.jitter_seed, JITTER_STREAM)
    amp = size // 16
    jy, jx = rng.integers(-amp, amp + 1, size=2)

    oy, ox = _quadrant_origin(scene.quadrant, size)
    cy = oy + size // 4 + jy
    cx = ox + size // 4 + jx
    r = size // 8

    ys, xs = np.ogrid[:size, :size]
    if scene.shape == "circle":
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r**2
    elif scene.shape == "square":
        mask = (np.abs(ys - cy) <= r) & (np.abs(xs - cx) <= r)
    else:  # triangle, apex up
        rise = ys - (cy - r)
        mask = (rise >= 0) & (ys <= cy + r) & (np.abs(xs - cx) * 2 <= rise)

    img = np.full((3, size, size), -1.0)
    img[COLORS.index(scene.color)][mask] = 1.0
    return img


def sample_scenes(n: int, seed: int) -> list[Scene]:
    """n uniformly drawn scenes with independent position jitter."""
    if n < 1:
        raise ValueError("need at least one scene")
    rng = philox(seed, DATA_STREAM)
    scenes = []
    for _ in range(n):
        scenes.append(
            Scene(
                shape=SHAPES[rng.integers(len(SHAPES))],
                color=COLORS[rng.integers(len(COLORS))],
                quadrant=QUADRANTS[rng.integers(len(QUADRANTS))],
                jitter_seed=int(rng.integers(2**31)),
            )
        )
    return scenes


def sample_dataset(n: int, seed: int, size: int = 32):
    """List of (image, token id tuple) pairs for training."""
    return [(render(s, size), s.token_ids()) for s in sample_scenes(n, seed)]
