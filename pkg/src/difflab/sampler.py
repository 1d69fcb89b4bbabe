"""Euler-Maruyama discretization of the time-reversed diffusion.

Starting from N(0, I), each step of the reverse process applies the drift
x/2 + score(x, y, t) over a decreasing time grid from T to the early
stopping time t0.  The default grid is geometric, concentrating nodes
near t0 where the score stiffens like 1/sigma_t^2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NumericalAbort
from .rng import derive_rng

log = logging.getLogger(__name__)

_DRIFT_CLAMP = 1e6


class SamplerAbort(NumericalAbort):
    """Non-finite state encountered during reverse integration."""


@dataclass(frozen=True)
class BackwardConfig:
    T: float = 5.0
    t0: float = 0.01
    steps: int = 500
    grid: str = "geometric"  # or "uniform"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0 < self.t0 < self.T:
            raise ValueError("need 0 < t0 < T")
        if self.grid not in ("geometric", "uniform"):
            raise ValueError("grid must be 'geometric' or 'uniform'")


def time_grid(cfg: BackwardConfig) -> np.ndarray:
    """Strictly decreasing node times from T to t0 (steps+1 nodes)."""
    k = np.arange(cfg.steps + 1)
    if cfg.grid == "uniform":
        nodes = cfg.T + (cfg.t0 - cfg.T) * k / cfg.steps
    else:
        nodes = np.exp(np.log(cfg.T) + (np.log(cfg.t0) - np.log(cfg.T)) * k / cfg.steps)
    nodes[0], nodes[-1] = cfg.T, cfg.t0
    return nodes


def backward_sample(score_fn, y, cfg: BackwardConfig, rng: np.random.Generator, d: int | None = None):
    """One (or a batch of) reverse-SDE draw(s) stopped at t0.

    score_fn(x (m,d), y or None, t (m,)) -> (m,d).  The dimension d is
    inferred from a probe call when not given.  Pass a rng whose first
    draw is the N(0, I) initialization.
    """
    if d is None:
        probe = np.zeros((1, 1))
        try:
            d = np.asarray(score_fn(probe, y, np.full(1, cfg.T))).shape[1]
        except Exception as exc:  # pragma: no cover - defensive
            raise ValueError("could not infer dimension; pass d explicitly") from exc
    x = rng.standard_normal((1, d))
    return _integrate(score_fn, y, cfg, rng, x)[0]


def _integrate(score_fn, y, cfg: BackwardConfig, rng: np.random.Generator, x: np.ndarray):
    nodes = time_grid(cfg)
    m, d = x.shape
    for step in range(cfg.steps):
        t_cur, t_next = nodes[step], nodes[step + 1]
        dt = t_cur - t_next
        score = np.asarray(score_fn(x, y, np.full(m, t_cur)))
        if not np.all(np.isfinite(score)):
            raise SamplerAbort(f"non-finite score at step {step}, t={t_cur:.6g}")
        mag = np.abs(score)
        if np.any(mag > _DRIFT_CLAMP):
            log.warning("clamping score drift at step %d (max |s| = %.3g)", step, mag.max())
            score = np.clip(score, -_DRIFT_CLAMP, _DRIFT_CLAMP)
        x = x + dt * (0.5 * x + score) + np.sqrt(dt) * rng.standard_normal((m, d))
        if not np.all(np.isfinite(x)):
            raise SamplerAbort(f"non-finite state at step {step}, t={t_next:.6g}")
    return x


def batch_sample(score_fn, y, cfg: BackwardConfig, count: int, seed: int, d: int | None = None,
                 chunk: int = 256):
    """`count` independent reverse draws, deterministic under `seed`.

    Each sample owns the derived stream (seed, index), so splitting into
    batches of any size reproduces the identical sample list.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if d is None:
        d = np.asarray(score_fn(np.zeros((1, 1)), y, np.full(1, cfg.T))).shape[1]
    out = np.empty((count, d))
    nodes = time_grid(cfg)
    for start in range(0, count, chunk):
        idx = range(start, min(start + chunk, count))
        # one contiguous draw per sample: row 0 is the init, rows 1.. the steps
        paths = np.stack(
            [derive_rng(seed, i).standard_normal((cfg.steps + 1, d)) for i in idx]
        )
        x = paths[:, 0]
        m = x.shape[0]
        for step in range(cfg.steps):
            t_cur, t_next = nodes[step], nodes[step + 1]
            dt = t_cur - t_next
            score = np.asarray(score_fn(x, y, np.full(m, t_cur)))
            if not np.all(np.isfinite(score)):
                bad = int(np.argwhere(~np.isfinite(score))[0][0])
                raise SamplerAbort(
                    f"non-finite score for sample {start + bad} at step {step}, t={t_cur:.6g}"
                )
            score = np.clip(score, -_DRIFT_CLAMP, _DRIFT_CLAMP)
            x = x + dt * (0.5 * x + score) + np.sqrt(dt) * paths[:, step + 1]
            if not np.all(np.isfinite(x)):
                bad = int(np.argwhere(~np.isfinite(x))[0][0])
                raise SamplerAbort(
                    f"non-finite state for sample {start + bad} at step {step}, t={t_next:.6g}"
                )
        out[start : start + m] = x
    return out


def samples_to_csv(path, samples, y=None):
    """One row per sample: y columns (if any) then x columns."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    d = samples.shape[1]
    ycols = [] if y is None else list(np.asarray(y, dtype=float).reshape(-1))
    header = [f"y{j}" for j in range(len(ycols))] + [f"x{i}" for i in range(d)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in samples:
            vals = ycols + list(row)
            fh.write(",".join(f"{v:.17g}" for v in vals) + "\n")
