"""Evaluation estimators: score risk, histogram TV, reward gap, rate fits.

The score risk is the time-averaged weighted L2 deviation

    R(s) = (1/(T - t0)) integral_{t0}^{T} E_{(x0,y)} E_{x_t|x0} |s - grad log p_t|^2 dt

estimated by stratified Monte Carlo over t (the integrand grows like
1/sigma_t^4 near t0, so plain uniform sampling has needlessly heavy
tails).  Each stratum is evaluated at two independent t nodes, which
yields an unbiased variance estimate of the stratum mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalAbort, ValidationFailure
from .schedule import alpha_sigma

_RISK_STRATA = 32


@dataclass(frozen=True)
class RiskEstimate:
    value: float
    mc_std_error: float
    t_nodes: int
    x_draws_per_t: int

    def __post_init__(self):
        if self.value < 0 or self.mc_std_error < 0:
            raise ValueError("risk estimates are nonnegative")


def score_risk(candidate, oracle, spec, t0: float, T: float, draws: int,
               rng: np.random.Generator, conditional: bool = True,
               strata: int = _RISK_STRATA, y_law=None) -> RiskEstimate:
    """Weighted-L2 deviation of candidate from oracle along the diffusion.

    candidate and oracle are (x (m,d), y (m,d_y) or None, t scalar) -> (m,d).
    With conditional=False the y column is hidden from both (marginal /
    null-branch risk).  spec supplies (x0, y) draws via sample_conditional.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    if not 0 < t0 < T:
        raise ValueError("need 0 < t0 < T")
    from .densities import sample_dataset

    nodes = 2 * strata
    per_node = max(1, int(np.ceil(draws / nodes)))
    width = (T - t0) / strata
    stratum_means = np.empty((strata, 2))
    for h in range(strata):
        for r in range(2):
            t = t0 + width * (h + rng.random())
            xs, ys = sample_dataset(spec, per_node, rng, y_law=y_law)
            alpha, sigma = alpha_sigma(t)
            x_t = alpha * xs + sigma * rng.standard_normal(xs.shape)
            y_arg = ys if conditional else None
            cand = np.asarray(candidate(x_t, y_arg, t))
            if not np.all(np.isfinite(cand)):
                bad = int(np.argwhere(~np.isfinite(cand))[0][0])
                raise NumericalAbort(
                    f"candidate score non-finite at x={x_t[bad]}, "
                    f"y={ys[bad]}, t={t:.6g}"
                )
            ref = np.asarray(oracle(x_t, y_arg, t))
            stratum_means[h, r] = np.sum((cand - ref) ** 2, axis=1).mean()
    value = stratum_means.mean()
    # each stratum contributes var((a+b)/2) = (a-b)^2 / 4, averaged with 1/S^2
    var = np.sum((stratum_means[:, 0] - stratum_means[:, 1]) ** 2 / 4.0) / strata**2
    return RiskEstimate(value=float(value), mc_std_error=float(np.sqrt(var)),
                        t_nodes=nodes, x_draws_per_t=per_node)


def mixed_risk(cond: RiskEstimate, uncond: RiskEstimate) -> RiskEstimate:
    """Equal-weight combination of the conditional and null-branch risks."""
    se = 0.5 * np.hypot(cond.mc_std_error, uncond.mc_std_error)
    return RiskEstimate(value=0.5 * (cond.value + uncond.value),
                        mc_std_error=float(se),
                        t_nodes=cond.t_nodes + uncond.t_nodes,
                        x_draws_per_t=min(cond.x_draws_per_t, uncond.x_draws_per_t))


def tv_histogram(samples_a, samples_b, bounds, bins: int = 64) -> float:
    """Half L1 distance between the two empirical histograms.

    bounds is ((lo, hi), ...) per axis, d <= 2; mass falling outside
    goes to one overflow cell per axis side so the result stays a valid
    total-variation estimate on all of R^d.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets must share a dimension")
    d = a.shape[1]
    if d > 2:
        raise ValueError("histogram TV implemented for d <= 2")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    bounds = np.asarray(bounds, dtype=float).reshape(d, 2)
    if np.any(bounds[:, 0] >= bounds[:, 1]):
        raise ValueError("each bound must satisfy lo < hi")

    def masses(x):
        inside = np.ones(x.shape[0], dtype=bool)
        for j in range(d):
            inside &= (x[:, j] >= bounds[j, 0]) & (x[:, j] <= bounds[j, 1])
        edges = [np.linspace(bounds[j, 0], bounds[j, 1], bins + 1) for j in range(d)]
        hist, _ = np.histogramdd(x[inside], bins=edges)
        over = np.zeros(2 * d)
        out = x[~inside]
        if out.shape[0]:
            # attribute each outside point to its first violated axis side
            taken = np.zeros(out.shape[0], dtype=bool)
            for j in range(d):
                lo = (~taken) & (out[:, j] < bounds[j, 0])
                over[2 * j] = lo.sum()
                taken |= lo
                hi = (~taken) & (out[:, j] > bounds[j, 1])
                over[2 * j + 1] = hi.sum()
                taken |= hi
        return np.concatenate([hist.ravel(), over]) / x.shape[0]

    return float(0.5 * np.abs(masses(a) - masses(b)).sum())


def subopt(samples, reward, a: float, reward_bound: float = np.inf) -> float:
    """Gap between the target reward value and the achieved mean reward."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("samples must be nonempty")
    vals = np.asarray([reward(x) for x in samples], dtype=float)
    if np.any(np.abs(vals) > reward_bound):
        worst = float(np.abs(vals).max())
        raise ValidationFailure(
            f"reward magnitude {worst:.6g} exceeds the declared bound {reward_bound:.6g}"
        )
    return float(a - vals.mean())


def posterior_mean_error(samples, oracle_mean) -> float:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("samples must be nonempty")
    oracle_mean = np.asarray(oracle_mean, dtype=float).reshape(-1)
    return float(np.linalg.norm(samples.mean(axis=0) - oracle_mean))


def rate_fit(sizes, errors):
    """Least-squares slope of log(error) on log(size): (slope, intercept, r2)."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if sizes.shape != errors.shape or sizes.ndim != 1 or sizes.size < 3:
        raise ValueError("need equal-length 1-d lists with at least 3 entries")
    if np.any(sizes <= 0) or np.any(errors <= 0):
        raise ValueError("sizes and errors must be positive")
    lx, ly = np.log(sizes), np.log(errors)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else 1.0 - np.sum(resid**2) / ss_tot
    return float(slope), float(intercept), float(r2)


def estimate_row(name: str, config_hash: str, value: float, se: float,
                 draws: int, seed: int) -> str:
    """CSV row shared by every estimator: name, hash, value, SE, draws, seed."""
    return (f"{name},{config_hash},{value:.17g},{se:.17g},{draws},{seed}")


ESTIMATE_HEADER = "estimator,config_hash,value,std_error,draws,seed"
