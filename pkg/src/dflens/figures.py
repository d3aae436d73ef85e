"""Matplotlib report figures written next to the JSON/CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history, path):
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=120)
    ax.plot(history, lw=0.8)
    window = min(100, max(1, len(history) // 10))
    if len(history) > window:
        smooth = np.convolve(history, np.ones(window) / window, mode="valid")
        ax.plot(np.arange(window - 1, len(history)), smooth, lw=1.6)
    ax.set_xlabel("training step")
    ax.set_ylabel("denoising MSE")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_game_curves(curves_by_label: dict, game: str, path):
    """One panel per game: score vs perturbed fraction for each ordering."""
    fig, ax = plt.subplots(figsize=(5.5, 4), dpi=120)
    for name, curves in curves_by_label.items():
        fracs = curves[0].fractions
        stacked = np.stack([c.scores for c in curves])
        mean = stacked.mean(axis=0)
        ax.plot(fracs, mean, label=f"{name} (auc {np.mean([c.auc for c in curves]):.3f})")
        if len(curves) > 1:
            ax.fill_between(fracs, stacked.min(axis=0), stacked.max(axis=0), alpha=0.15)
    verb = "removed" if game == "deletion" else "restored"
    ax.set_xlabel(f"fraction of pixels {verb}")
    ax.set_ylabel("output similarity")
    ax.set_title(f"{game} game")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_relevance_figure(profiles, token_labels, path):
    """Line graph per sampling mode plus summed relevance bars."""
    n = len(profiles)
    fig, axes = plt.subplots(1, n + 1, figsize=(4 * (n + 1), 3.2), dpi=120)
    for ax, profile in zip(axes[:-1], profiles):
        for row, label in zip(profile.matrix, token_labels):
            ax.plot(range(len(profile.steps)), row, label=label, lw=1.2)
        ax.set_title(profile.mode)
        ax.set_xlabel("inference step")
        ax.set_ylabel("relevance")
        ax.legend(fontsize=7)
    width = 0.8 / n
    for i, profile in enumerate(profiles):
        axes[-1].bar(
            np.arange(len(token_labels)) + i * width,
            profile.totals,
            width=width,
            label=profile.mode,
        )
    axes[-1].set_xticks(np.arange(len(token_labels)) + 0.4 - width / 2)
    axes[-1].set_xticklabels(token_labels, rotation=30, fontsize=7)
    axes[-1].set_ylabel("summed relevance")
    axes[-1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_image_strip(images, labels, path):
    """Side-by-side [3, H, W] images in [-1, 1] with captions."""
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6), dpi=120)
    if n == 1:
        axes = [axes]
    for ax, img, label in zip(axes, images, labels):
        shown = np.clip((np.asarray(img).transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
        ax.imshow(shown, interpolation="nearest")
        ax.set_title(label, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
