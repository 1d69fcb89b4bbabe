"""Forward Ornstein-Uhlenbeck noising process.

The forward SDE dX = -X/2 dt + dW has the Gaussian transition kernel
x_t | x_0 ~ N(alpha_t x_0, sigma_t^2 I) with alpha_t = exp(-t/2) and
sigma_t^2 = 1 - exp(-t).  Its log-gradient in x_t is the regression
target of denoising score matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Time window of the diffusion: early-stopping time t0 and horizon T."""

    t0: float = 0.01
    T: float = 5.0

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)):
            raise ValueError("t0 and T must be finite")
        if not 0.0 < self.t0 < self.T:
            raise ValueError(f"need 0 < t0 < T, got t0={self.t0}, T={self.T}")


def _check_time(t, allow_zero: bool = True):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("time must be finite")
    if allow_zero:
        if np.any(t < 0):
            raise ValueError("time must be nonnegative")
    else:
        if np.any(t <= 0):
            raise ValueError("time must be strictly positive")
    return t


def alpha_sigma(t):
    """(alpha_t, sigma_t) of the forward kernel.

    sigma_t uses sqrt(-expm1(-t)) so that tiny t (the early-stopping
    regime) does not lose precision to cancellation.
    """
    t = _check_time(t)
    alpha = np.exp(-t / 2.0)
    sigma = np.sqrt(-np.expm1(-t))
    return alpha, sigma


def perturb(x0, t, rng: np.random.Generator):
    """Draw x_t ~ N(alpha_t x0, sigma_t^2 I)."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    alpha, sigma = alpha_sigma(t)
    z = rng.standard_normal(x0.shape)
    return alpha * x0 + sigma * z


def kernel_score(x_t, x0, t):
    """Transition-kernel score -(x_t - alpha_t x0) / sigma_t^2 (needs t > 0)."""
    t = _check_time(t, allow_zero=False)
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    alpha, sigma = alpha_sigma(t)
    return -(x_t - alpha * x0) / sigma**2
