"""Saliency maps for the denoising process.

Two tools with complementary access models:

* ``df_rise`` treats the model as a black box. It only receives a
  forward-evaluation callable, perturbs the step-t latent with random
  binary masks, scores each perturbed prediction against the unperturbed
  one with a structural similarity measure, and accumulates
  similarity-weighted masks.
* ``df_cam`` inspects the model. It sums the predicted noise into a scalar
  score, backpropagates to a chosen activation map, weights each channel
  by its globally averaged gradient, and keeps the positive part of the
  weighted combination.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from . import tensor as T
from .rng import MASK_STREAM, philox

SIMILARITY_KINDS = ("structure", "luminance", "contrast", "cosine")


@dataclass(frozen=True)
class SimilarityConfig:
    """Similarity measure plus the stabilizers that keep denominators alive."""

    kind: str = "structure"
    c1: float = 1e-4
    c2: float = 1e-4
    c3: float = 5e-5

    def __post_init__(self):
        if self.kind not in SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.kind!r}")
        if min(self.c1, self.c2, self.c3) <= 0:
            raise ValueError("stabilizers must be positive")


@dataclass
class MaskBatch:
    """N binary masks over an H x W grid."""

    masks: np.ndarray
    keep_prob: float
    seed: int
    grid: tuple[int, int] | None = None

    def __len__(self):
        return self.masks.shape[0]


@dataclass
class SaliencyMap:
    """Normalized per-pixel importance with provenance."""

    values: np.ndarray
    tool: str
    step: int
    config: dict = field(default_factory=dict)


def _nearest_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape[-2:]
    rows = (np.arange(h) * gh // h).astype(np.intp)
    cols = (np.arange(w) * gw // w).astype(np.intp)
    return grid[..., rows[:, None], cols[None, :]]


def generate_masks(
    n: int, h: int, w: int, keep_prob: float = 0.5, seed: int = 0, grid=None
) -> MaskBatch:
    """Binary masks from thresholded per-element Gaussian draws.

    Each element keeps its pixel when the draw exceeds the standard-normal
    quantile at 1 - keep_prob, so the expected keep fraction is keep_prob.
    With ``grid = (h', w')`` the field is drawn coarse and nearest-neighbor
    upsampled before thresholding.
    """
    if n < 1:
        raise ValueError("need at least one mask")
    if not 0.0 < keep_prob < 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1), got {keep_prob}")
    threshold = NormalDist().inv_cdf(1.0 - keep_prob)
    rng = philox(seed, MASK_STREAM)
    if grid is not None:
        gh, gw = grid
        draws = rng.standard_normal((n, gh, gw))
        draws = _nearest_upsample(draws, h, w)
    else:
        draws = rng.standard_normal((n, h, w))
    masks = (draws > threshold).astype(np.float64)
    return MaskBatch(masks=masks, keep_prob=keep_prob, seed=seed, grid=grid)


def _channel_stats(a: np.ndarray, b: np.ndarray):
    """Flatten to [C, spatial] and return per-channel moments."""
    if a.ndim >= 3:
        af = a.reshape(a.shape[0], -1)
        bf = b.reshape(b.shape[0], -1)
    else:
        af = a.reshape(1, -1)
        bf = b.reshape(1, -1)
    mu_a = af.mean(axis=1)
    mu_b = bf.mean(axis=1)
    var_a = af.var(axis=1)
    var_b = bf.var(axis=1)
    cov = ((af - mu_a[:, None]) * (bf - mu_b[:, None])).mean(axis=1)
    return mu_a, mu_b, var_a, var_b, cov


def similarity(a, b, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    """Similarity between two equally shaped arrays, averaged over channels.

    structure: (cov + C3) / (std_a std_b + C3)
    luminance: (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
    contrast:  (2 cov + C2) / (var_a + var_b + C2)
    cosine:    plain inner-product cosine over the flattened arrays
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise T.ShapeError(f"similarity operands differ in shape: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("similarity needs at least 2 elements")
    if cfg.kind == "cosine":
        af, bf = a.ravel(), b.ravel()
        na, nb = np.linalg.norm(af), np.linalg.norm(bf)
        if na == 0.0 or nb == 0.0:
            return 1.0 if na == nb else 0.0
        return float(af @ bf / (na * nb))
    mu_a, mu_b, var_a, var_b, cov = _channel_stats(a, b)
    if cfg.kind == "luminance":
        vals = (2 * mu_a * mu_b + cfg.c1) / (mu_a**2 + mu_b**2 + cfg.c1)
    elif cfg.kind == "contrast":
        vals = (2 * cov + cfg.c2) / (var_a + var_b + cfg.c2)
    else:
        vals = (cov + cfg.c3) / (np.sqrt(var_a) * np.sqrt(var_b) + cfg.c3)
    return float(vals.mean())


def minmax_normalize(raw: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min()
    span = raw.max() - lo
    if span == 0.0:
        return np.zeros_like(raw)
    return (raw - lo) / span


def df_rise(
    predict,
    r_t: np.ndarray,
    masks: MaskBatch,
    cfg: SimilarityConfig = SimilarityConfig(),
    step: int = 0,
    workers: int | None = None,
) -> SaliencyMap:
    """Mask-accumulation saliency for the latent at one inference step.

    ``predict`` is a forward-evaluation callable mapping an input array to
    the model output; nothing else about the model is visible here. Masks
    broadcast across channels. Accumulation order is fixed by mask index,
    so results are identical for any worker count.
    """
    if len(masks) == 0:
        raise ValueError("mask batch is empty")
    r_t = np.asarray(r_t, dtype=np.float64)
    if masks.masks.shape[1:] != r_t.shape[-2:]:
        raise T.ShapeError(
            f"mask extent {masks.masks.shape[1:]} does not match input {r_t.shape[-2:]}"
        )
    base = predict(r_t)

    def score(idx: int) -> float:
        out = predict(r_t * masks.masks[idx])
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite model output for mask {idx}")
        return similarity(out, base, cfg)

    n = len(masks)
    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, range(n)))
    else:
        scores = [score(i) for i in range(n)]

    accum = np.zeros(r_t.shape[-2:])
    for i in range(n):
        accum += masks.masks[i] * scores[i]
    return SaliencyMap(
        values=minmax_normalize(accum),
        tool="df_rise",
        step=step,
        config={
            "n_masks": n,
            "keep_prob": masks.keep_prob,
            "mask_seed": masks.seed,
            "grid": list(masks.grid) if masks.grid else None,
            "similarity": cfg.kind,
        },
    )


def df_cam(model, r_t: np.ndarray, t: int, cond, layer: str = "dec2") -> SaliencyMap:
    """Gradient-weighted activation saliency at one inference step.

    The target score is the sum of the predicted noise; channel weights are
    the globally average-pooled gradients of that score with respect to the
    chosen activation map.
    """
    trace = model.forward(r_t, t, cond, capture=True)
    if layer not in trace.activations:
        raise KeyError(
            f"unknown layer {layer!r}; available: {sorted(trace.activations)}"
        )
    act = trace.activations[layer]
    T.backward(T.tsum(trace.eps_hat))
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * act.data).sum(axis=0), 0.0)
    h, w = r_t.shape[-2:]
    cam = _nearest_upsample(cam, h, w)
    return SaliencyMap(
        values=minmax_normalize(cam),
        tool="df_cam",
        step=t,
        config={"layer": layer},
    )
