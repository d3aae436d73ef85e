"""Noise schedules, forward noising, reverse steps and time-step plans.

Everything here operates on plain numpy arrays and is a pure function of
its inputs; the autodiff tensors only appear inside the denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Reference endpoints for the linear variance ramp at 1000 steps. For other
# step counts the endpoints are rescaled by 1000/T so the cumulative
# signal level still decays to ~0 at the end of the chain.
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
BETA_MAX = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables for a T-step diffusion chain.

    ``alpha_bar[t]`` is the cumulative product of ``1 - beta`` up to and
    including step t; ``sigma[t]`` is the reverse-step noise scale.
    """

    kind: str
    total_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        t = self.total_steps
        if not (len(self.beta) == len(self.alpha_bar) == len(self.sigma) == t):
            raise ValueError("schedule tables must all have length T")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta values must lie strictly in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(kind: str, total_steps: int) -> NoiseSchedule:
    """Build a linear or cosine variance schedule with T steps."""
    t = int(total_steps)
    if t < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {t}")
    if kind == "linear":
        ramp = 1000.0 / t
        beta = np.linspace(
            min(LINEAR_BETA_START * ramp, BETA_MAX),
            min(LINEAR_BETA_END * ramp, BETA_MAX),
            t,
        )
    elif kind == "cosine":
        def f(u):
            return math.cos((u / t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

        beta = np.array([min(1.0 - f(i + 1) / f(i), BETA_MAX) for i in range(t)])
        beta = np.clip(beta, 1e-8, BETA_MAX)
    else:
        raise ValueError(f"unknown schedule kind {kind!r} (expected linear or cosine)")
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(beta)
    return NoiseSchedule(kind=kind, total_steps=t, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def _check_step(t: int, schedule: NoiseSchedule):
    if not 0 <= t < schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps - 1}]")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noise a clean sample to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    _check_step(t, schedule)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """One ancestral reverse step; the caller supplies z (zeros at t = 0)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match eps_hat shape {eps_hat.shape}")
    _check_step(t, schedule)
    beta = schedule.beta[t]
    ab = schedule.alpha_bar[t]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
    return mean + schedule.sigma[t] * np.asarray(z, dtype=np.float64)


def predict_x0(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Clean-sample estimate implied by a noise prediction at step t."""
    _check_step(t, schedule)
    ab = schedule.alpha_bar[t]
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
    sigma_t: float,
    z: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Non-Markovian reverse step from t to t_prev.

    ``t_prev = -1`` denotes the fully denoised endpoint (cumulative signal
    level 1), in which case the result is the clean-sample estimate.
    With ``sigma_t = 0`` the step is deterministic.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_step(t, schedule)
    if not -1 <= t_prev < t:
        raise ValueError(f"t_prev must satisfy -1 <= t_prev < t, got {t_prev} vs {t}")
    if sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")
    ab_prev = 1.0 if t_prev < 0 else schedule.alpha_bar[t_prev]
    rem = 1.0 - ab_prev - sigma_t**2
    if rem < 0:
        raise ValueError(
            f"sigma_t = {sigma_t} exceeds the remaining noise budget at t_prev = {t_prev}"
        )
    x0_hat = predict_x0(x_t, t, eps_hat, schedule)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(rem) * eps_hat
    if sigma_t > 0:
        out = out + sigma_t * np.asarray(z, dtype=np.float64)
    return out


@dataclass(frozen=True)
class TimestepPlan:
    """Ordered inference steps, densest wherever the sampler concentrates."""

    steps: tuple[int, ...]
    mode: str
    gamma: int = 0
    l: int = 0
    total_steps: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("plan has no steps")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("plan steps must be strictly decreasing")
        if self.steps[-1] < 0:
            raise ValueError("plan steps must be non-negative")

    def to_json(self) -> list[int]:
        return [int(s) for s in self.steps]


def uniform_timesteps(total_steps: int, l: int) -> TimestepPlan:
    """l steps descending from T-1 at constant spacing floor(T/l)."""
    t, l = int(total_steps), int(l)
    if not 1 <= l <= t:
        raise ValueError(f"inference step count {l} outside [1, {t}]")
    spacing = t // l
    steps = tuple(t - 1 - i * spacing for i in range(l))
    return TimestepPlan(steps=steps, mode="uniform", gamma=0, l=l, total_steps=t)


def exponential_raw_positions(total_steps: int, l: int, gamma: int, mode: str) -> np.ndarray:
    """Unrounded positions of the exponential sampler for t = 0..l.

    ``delta`` is the base solving delta^(l+gamma) = T; early mode returns
    T - delta^(t+gamma) (dense at high steps), latter mode returns
    |T - (T - delta^(t+gamma))| = delta^(t+gamma) (dense at low steps).
    """
    t_total, l, gamma = int(total_steps), int(l), int(gamma)
    if t_total < 2:
        raise ValueError("total_steps must be >= 2")
    if l < 1:
        raise ValueError("need at least one inference step")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if mode not in ("early", "latter"):
        raise ValueError(f"unknown exponential mode {mode!r}")
    delta = math.exp(math.log(t_total) / (l + gamma))
    powers = delta ** (np.arange(l + 1, dtype=np.float64) + gamma)
    return t_total - powers if mode == "early" else powers


def exponential_timesteps(total_steps: int, l: int, gamma: int, mode: str) -> TimestepPlan:
    """Exponentially spaced plan, rounded, deduplicated and descending.

    Rounding collisions are dropped rather than re-spaced, so the plan may
    hold fewer than l+1 entries. T-1 is prepended when absent so the
    reverse process always starts from pure noise.
    """
    t_total = int(total_steps)
    raw = exponential_raw_positions(t_total, l, gamma, mode)
    rounded = np.clip(np.rint(raw).astype(int), 0, t_total - 1)
    steps = sorted(set(rounded.tolist()), reverse=True)
    if steps[0] != t_total - 1:
        steps.insert(0, t_total - 1)
    return TimestepPlan(
        steps=tuple(steps), mode=f"exp_{mode}", gamma=int(gamma), l=int(l), total_steps=t_total
    )


def make_plan(total_steps: int, mode: str, l: int, gamma: int = 0) -> TimestepPlan:
    """Dispatch on plan mode name (uniform, exp_early, exp_latter)."""
    if mode == "uniform":
        return uniform_timesteps(total_steps, l)
    if mode in ("exp_early", "exp_latter"):
        return exponential_timesteps(total_steps, l, gamma, mode.removeprefix("exp_"))
    raise ValueError(f"unknown plan mode {mode!r}")
