from __future__ import annotations

import numpy as np
import pytest

import dflens as dl


@pytest.fixture(scope="session")
def linear_schedule():
    return dl.make_schedule("linear", 1000)


@pytest.fixture(scope="session")
def tiny_model():
    """Small untrained model for shape and interface tests."""
    return dl.Denoiser(dl.ArchSpec(image_size=16, base_width=8), seed=1)


@pytest.fixture(scope="session")
def tiny_cond():
    return (0, 4, 8)


@pytest.fixture(scope="session")
def trained_model(linear_schedule):
    """Session-trained full-size model shared by the expensive tests.

    The training settings match the committed calibration record; the
    acceptance suite asserts the loss-halving criterion on this exact run.
    """
    dataset = dl.sample_dataset(128, seed=11)
    model = dl.Denoiser(dl.ArchSpec(), seed=3)
    history = dl.train(model, dataset, linear_schedule, steps=2000, lr=2e-3, seed=7)
    return model, history


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
