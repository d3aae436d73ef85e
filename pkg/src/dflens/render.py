"""Deterministic image output: colormap lookup, overlay compositing, PNG io.

The 256-entry colormap table is computed from fixed polynomial
coefficients at import time rather than taken from a plotting library, so
rendered bytes do not depend on the plotting environment.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

# Quintic fits of a blue-to-red rainbow ramp, evaluated on [0, 1].
_R = (0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943)
_G = (0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604)
_B = (0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973)


def _poly(coeffs, x):
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


def _build_lut() -> np.ndarray:
    x = np.linspace(0.0, 1.0, 256)
    rgb = np.stack([_poly(_R, x), _poly(_G, x), _poly(_B, x)], axis=1)
    return np.clip(np.rint(np.clip(rgb, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


COLORMAP = _build_lut()


def to_uint8_image(x: np.ndarray) -> np.ndarray:
    """[3, H, W] values in [-1, 1] to an [H, W, 3] uint8 image."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def colorize(values: np.ndarray) -> np.ndarray:
    """[H, W] values in [0, 1] to an [H, W, 3] uint8 colormap image."""
    idx = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.intp)
    return COLORMAP[idx]


def render_heatmap(smap, base: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Composite a saliency map onto its base image.

    alpha = 0 reproduces the base exactly; alpha = 1 is the pure colormap.
    Output dimensions equal the base dimensions.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    values = smap.values if hasattr(smap, "values") else np.asarray(smap)
    base_rgb = np.clip(np.asarray(base, dtype=np.float64), -1.0, 1.0)
    base_rgb = (base_rgb.transpose(1, 2, 0) + 1.0) * 127.5
    heat_rgb = COLORMAP[
        np.clip(np.rint(values * 255.0), 0, 255).astype(np.intp)
    ].astype(np.float64)
    out = (1.0 - alpha) * base_rgb + alpha * heat_rgb
    return np.rint(out).astype(np.uint8)


def upscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Integer nearest-neighbor upscale of an [H, W, 3] image."""
    if factor <= 1:
        return img
    return img.repeat(factor, axis=0).repeat(factor, axis=1)


def save_png(img: np.ndarray, path):
    """Write an [H, W, 3] uint8 array as an 8-bit RGB PNG."""
    Image.fromarray(np.ascontiguousarray(img), mode="RGB").save(path, format="PNG")
