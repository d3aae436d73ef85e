"""Shared test helpers: independent oracles and analytic fixture models.

Everything here is deliberately naive (loops, finite differences) so it
stays independent of the implementation paths it is used to check.
"""

from __future__ import annotations

import numpy as np

from dflens import tensor as T


def finite_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function at every element."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * h)
        it.iternext()
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def check_gradient(build, tensors: dict[str, np.ndarray], h: float = 1e-4) -> float:
    """Compare reverse-mode gradients of build(**tensors) to finite differences.

    ``build`` maps named Tensors to a scalar Tensor. Returns the worst
    relative error over all inputs.
    """
    wrapped = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in tensors.items()}
    loss = build(**wrapped)
    grads = T.backward(loss)
    worst = 0.0
    for name, arr in tensors.items():
        def f(x, name=name):
            with T.no_grad():
                frozen = {
                    k: T.Tensor(x if k == name else v.data) for k, v in wrapped.items()
                }
                return build(**frozen).item()

        fd = finite_difference(f, arr.copy(), h)
        worst = max(worst, relative_error(fd, grads[wrapped[name]]))
    return worst


def loop_global_average_pool(a: np.ndarray) -> np.ndarray:
    c, h, w = a.shape
    out = np.zeros(c)
    for ci in range(c):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += a[ci, i, j]
        out[ci] = total / (h * w)
    return out


def loop_ddpm_step(x_t, t, eps_hat, z, schedule):
    beta = schedule.beta[t]
    ab = schedule.alpha_bar[t]
    sigma = schedule.sigma[t]
    out = np.zeros_like(x_t)
    flat_x, flat_e, flat_z = x_t.ravel(), eps_hat.ravel(), np.broadcast_to(z, x_t.shape).ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        mean = (flat_x[i] - beta / np.sqrt(1 - ab) * flat_e[i]) / np.sqrt(1 - beta)
        flat_o[i] = mean + sigma * flat_z[i]
    return out


def loop_ddim_step(x_t, t, t_prev, eps_hat, sigma_t, z, schedule):
    ab = schedule.alpha_bar[t]
    ab_prev = 1.0 if t_prev < 0 else schedule.alpha_bar[t_prev]
    out = np.zeros_like(x_t)
    flat_x, flat_e, flat_z = x_t.ravel(), eps_hat.ravel(), np.broadcast_to(z, x_t.shape).ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        x0 = (flat_x[i] - np.sqrt(1 - ab) * flat_e[i]) / np.sqrt(ab)
        flat_o[i] = (
            np.sqrt(ab_prev) * x0
            + np.sqrt(1 - ab_prev - sigma_t**2) * flat_e[i]
            + sigma_t * flat_z[i]
        )
    return out


def riemann_auc(fracs, scores, n: int = 200_000) -> float:
    """Midpoint Riemann sum over the piecewise-linear interpolant."""
    xs = np.linspace(fracs[0], fracs[-1], n, endpoint=False) + (fracs[-1] - fracs[0]) / (2 * n)
    return float(np.interp(xs, fracs, scores).mean() * (fracs[-1] - fracs[0]))


def recover_color(img: np.ndarray) -> int:
    """Index of the channel holding the shape (largest mass above background)."""
    return int((img + 1.0).sum(axis=(1, 2)).argmax())


def recover_quadrant(img: np.ndarray) -> int:
    """Quadrant index (tl, tr, bl, br) of the centroid of above-background mass."""
    mass = (img + 1.0).sum(axis=0)
    ys, xs = np.nonzero(mass > 0)
    size = img.shape[-1]
    cy, cx = (mass[ys, xs] * ys).sum() / mass[ys, xs].sum(), (mass[ys, xs] * xs).sum() / mass[
        ys, xs
    ].sum()
    return (0 if cy < size / 2 else 2) + (0 if cx < size / 2 else 1)


class PlantedPatchModel:
    """Analytic denoiser stand-in whose output depends only on one patch.

    The output is a fixed base pattern plus the (channel-averaged) content
    of a known 8x8 patch tiled across the full grid, so perturbations
    outside the patch cannot change the output at all. The nonzero base
    keeps the output non-constant even when the whole patch is zeroed.
    """

    def __init__(self, row: int, col: int, extent: int = 8, channels: int = 3, size: int = 32):
        self.row, self.col, self.extent = row, col, extent
        self.channels, self.size = channels, size
        self.base = 0.5 * np.random.default_rng(2**17 + 1).standard_normal(
            (channels, size, size)
        )

    def patch_indices(self) -> set[int]:
        return {
            i * self.size + j
            for i in range(self.row, self.row + self.extent)
            for j in range(self.col, self.col + self.extent)
        }

    def predict(self, x: np.ndarray) -> np.ndarray:
        patch = x[
            ..., self.row : self.row + self.extent, self.col : self.col + self.extent
        ].mean(axis=0)
        reps = self.size // self.extent
        return self.base + np.tile(patch, (reps, reps))

    def banded_input(self, seed: int) -> np.ndarray:
        """Standard normal field with controlled patch content.

        Inside the patch, all channels share alternating-sign values of
        near-unit magnitude, so every patch pixel carries comparable energy
        and a 3x3 occlusion kernel always displaces the output more from
        inside the patch (>= 4 cells hit) than from just outside (<= 3).
        """
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((self.channels, self.size, self.size))
        mag = rng.uniform(0.9, 1.1, size=(self.extent, self.extent))
        sign = np.indices((self.extent, self.extent)).sum(axis=0) % 2 * 2 - 1
        x[:, self.row : self.row + self.extent, self.col : self.col + self.extent] = mag * sign
        return x
