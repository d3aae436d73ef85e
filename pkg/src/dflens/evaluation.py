"""Faithfulness games and concept quantification.

The deletion game zeroes pixels in importance order and tracks how fast
the model output drifts from its unperturbed prediction; the insertion
game restores pixels into a blank canvas. Curves are scored by trapezoidal
AUC. With a similarity metric a faithful map yields a *lower* deletion AUC
and a *higher* insertion AUC than a random ordering.

Concept relevance aggregates the cross-attention weights over a full
generation run into one score per condition token per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import generate
from .rng import ORDER_STREAM, philox
from .saliency import SaliencyMap, SimilarityConfig, similarity

GAMES = ("deletion", "insertion")
ORDERING_KINDS = ("random", "occlusion")


@dataclass
class PerturbationCurve:
    fractions: np.ndarray
    scores: np.ndarray
    auc: float
    game: str
    ordering: str

    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(s)) for f, s in zip(self.fractions, self.scores)]


@dataclass
class RelevanceProfile:
    """Per-token attention mass over the steps of one generation run.

    ``matrix[token, step]`` is non-negative and every step column sums
    to 1. ``totals`` sums each token row over steps.
    """

    matrix: np.ndarray
    steps: tuple[int, ...]
    mode: str
    totals: np.ndarray = field(init=False)

    def __post_init__(self):
        self.totals = self.matrix.sum(axis=1)

    def step_means(self) -> np.ndarray:
        return self.matrix.mean(axis=1)


def auc(points) -> float:
    """Trapezoidal area under a polyline of (fraction, score) pairs."""
    pts = [(float(f), float(s)) for f, s in points]
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    fracs = np.array([p[0] for p in pts])
    scores = np.array([p[1] for p in pts])
    if np.any(np.diff(fracs) <= 0):
        raise ValueError("fractions must be strictly increasing")
    return float(np.trapezoid(scores, fracs))


def saliency_ordering(smap: SaliencyMap) -> np.ndarray:
    """Flat pixel indices by descending saliency, index-stable on ties."""
    return np.argsort(-smap.values.ravel(), kind="stable")


def ordering_baseline(
    kind: str,
    shape: tuple[int, int],
    seed: int = 0,
    predict=None,
    r_t: np.ndarray | None = None,
    patch_size: int = 3,
) -> np.ndarray:
    """Reference pixel orderings for the games.

    random: a seeded permutation of all pixels. occlusion: pixels ranked by
    how much the model output moves when a patch_size x patch_size
    neighborhood around the pixel is zeroed (needs predict and r_t).
    """
    h, w = shape
    if kind == "random":
        return philox(seed, ORDER_STREAM).permutation(h * w)
    if kind != "occlusion":
        raise ValueError(f"unknown ordering kind {kind!r}")
    if predict is None or r_t is None:
        raise ValueError("occlusion ordering needs predict and r_t")
    base = predict(r_t)
    half = patch_size // 2
    change = np.zeros(h * w)
    for i in range(h):
        for j in range(w):
            x = r_t.copy()
            x[..., max(0, i - half) : i + half + 1, max(0, j - half) : j + half + 1] = 0.0
            change[i * w + j] = np.abs(predict(x) - base).sum()
    return np.argsort(-change, kind="stable")


def perturbation_game(
    game: str,
    ordering,
    predict,
    r_t: np.ndarray,
    steps: int = 32,
    metric: SimilarityConfig = SimilarityConfig(),
    label: str | None = None,
) -> PerturbationCurve:
    """Run one deletion or insertion curve.

    ``ordering`` is either a SaliencyMap (pixels ranked by its values) or a
    precomputed flat index array. Removed pixels are set to zero across all
    channels, matching the mask semantics of the saliency tools.
    """
    if game not in GAMES:
        raise ValueError(f"unknown game {game!r}")
    if steps < 2:
        raise ValueError("need at least 2 curve steps")
    if isinstance(ordering, SaliencyMap):
        order = saliency_ordering(ordering)
        label = label or "saliency"
    else:
        order = np.asarray(ordering, dtype=np.intp)
        label = label or "custom"
    r_t = np.asarray(r_t, dtype=np.float64)
    h, w = r_t.shape[-2:]
    if order.size != h * w:
        raise ValueError(f"ordering covers {order.size} pixels, input has {h * w}")

    base = predict(r_t)
    flat_masks = np.zeros(h * w)
    fractions = np.arange(steps + 1) / steps
    scores = np.empty(steps + 1)
    for i, frac in enumerate(fractions):
        k = int(round(frac * h * w))
        flat_masks[:] = 0.0
        flat_masks[order[:k]] = 1.0
        touched = flat_masks.reshape(h, w)
        x = r_t * (1.0 - touched) if game == "deletion" else r_t * touched
        value = similarity(predict(x), base, metric)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite score at fraction {frac}")
        scores[i] = value
    return PerturbationCurve(
        fractions=fractions,
        scores=scores,
        auc=auc(zip(fractions, scores)),
        game=game,
        ordering=label,
    )


def concept_relevance(model, cond, schedule, plan, seed: int) -> RelevanceProfile:
    """Per-token attention mass at every step of a full generation run.

    Each step's scores are the spatial means of that token's attention row,
    renormalized to sum to 1 over tokens.
    """
    columns: list[np.ndarray] = []

    def collect(i, t, x, trace):
        if trace.attention is None:
            raise ValueError("model did not capture attention maps")
        col = trace.attention.mean(axis=1)
        columns.append(col / col.sum())

    generate(model, schedule, plan, cond, seed, capture=True, callback=collect)
    return RelevanceProfile(
        matrix=np.stack(columns, axis=1), steps=plan.steps, mode=plan.mode
    )
