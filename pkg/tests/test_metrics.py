import math

import numpy as np
import pytest
from scipy.stats import norm

from difflab.densities import ConditionalGaussianMixture
from difflab.errors import NumericalAbort, ValidationFailure
from difflab.metrics import (
    ESTIMATE_HEADER,
    RiskEstimate,
    estimate_row,
    mixed_risk,
    posterior_mean_error,
    rate_fit,
    score_risk,
    subopt,
    tv_histogram,
)
from difflab.rng import derive_rng


def shifted_gaussian_spec():
    # x | y ~ N(y, 1) as a single-component mixture
    return ConditionalGaussianMixture(
        weight_slopes=np.zeros((1, 1)),
        weight_offsets=np.zeros(1),
        mean_slopes=np.ones((1, 1, 1)),
        mean_offsets=np.zeros((1, 1)),
        covs=np.ones((1, 1, 1)),
        c1=1.0,
        c2=0.5,
    )


def oracle_fn(spec):
    return lambda x, y, t: spec.exact_score(x, y, t)


def test_risk_estimate_validation():
    with pytest.raises(ValueError):
        RiskEstimate(value=-1.0, mc_std_error=0.0, t_nodes=1, x_draws_per_t=1)
    with pytest.raises(ValueError):
        RiskEstimate(value=0.0, mc_std_error=-1.0, t_nodes=1, x_draws_per_t=1)


def test_oracle_candidate_has_zero_risk():
    spec = shifted_gaussian_spec()
    est = score_risk(oracle_fn(spec), oracle_fn(spec), spec, 0.05, 3.0, 512,
                     derive_rng(0, 0))
    assert est.value == 0.0 and est.mc_std_error == 0.0
    assert est.t_nodes == 64


def test_constant_shift_risk_is_exact():
    # candidate = oracle + 0.3 in each coordinate: risk is exactly 0.09 d
    spec = shifted_gaussian_spec()
    oracle = oracle_fn(spec)
    cand = lambda x, y, t: oracle(x, y, t) + 0.3
    est = score_risk(cand, oracle, spec, 0.05, 3.0, 512, derive_rng(1, 0))
    assert est.value == pytest.approx(0.09, rel=1e-12)
    assert est.mc_std_error == pytest.approx(0.0, abs=1e-12)


def test_zero_candidate_risk_near_fisher_information():
    # for the zero score, the risk is E ||grad log p_t||^2 which for
    # x | y ~ N(y, 1) equals 1 / (sigma_t^2 + alpha_t^2) ~= 1 at all t
    spec = shifted_gaussian_spec()
    zero = lambda x, y, t: np.zeros_like(x)
    est = score_risk(zero, oracle_fn(spec), spec, 0.05, 3.0, 8192, derive_rng(2, 0))
    assert est.value == pytest.approx(1.0, abs=5 * max(est.mc_std_error, 0.01))
    assert 0 < est.mc_std_error < 0.05


def test_risk_validation_and_abort():
    spec = shifted_gaussian_spec()
    with pytest.raises(ValueError):
        score_risk(oracle_fn(spec), oracle_fn(spec), spec, 0.05, 3.0, 0, derive_rng(0, 0))
    with pytest.raises(ValueError):
        score_risk(oracle_fn(spec), oracle_fn(spec), spec, 3.0, 0.05, 16, derive_rng(0, 0))
    bad = lambda x, y, t: np.full_like(x, np.nan)
    with pytest.raises(NumericalAbort):
        score_risk(bad, oracle_fn(spec), spec, 0.05, 3.0, 16, derive_rng(0, 0))


def test_conditional_flag_hides_y():
    spec = shifted_gaussian_spec()
    seen = []
    probe = lambda x, y, t: (seen.append(y), spec.exact_score(x, np.full((x.shape[0], 1), 0.5), t))[1]

    def marg(x, y, t):
        return spec.marginal_score(x, t)

    score_risk(probe, marg, spec, 0.5, 1.0, 8, derive_rng(3, 0), conditional=False,
               strata=2)
    assert all(y is None for y in seen)


def test_mixed_risk_combination():
    a = RiskEstimate(value=1.0, mc_std_error=0.2, t_nodes=64, x_draws_per_t=8)
    b = RiskEstimate(value=3.0, mc_std_error=0.4, t_nodes=64, x_draws_per_t=4)
    m = mixed_risk(a, b)
    assert m.value == 2.0
    assert m.mc_std_error == pytest.approx(0.5 * math.hypot(0.2, 0.4))
    assert m.t_nodes == 128 and m.x_draws_per_t == 4


def test_tv_identical_and_disjoint():
    rng = np.random.default_rng(0)
    xs = rng.normal(size=(500, 1))
    assert tv_histogram(xs, xs, [(-4, 4)]) == 0.0
    assert tv_histogram(xs - 100, xs + 100, [(-4, 4)]) == 1.0


def test_tv_symmetry_and_sample_permutation():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(400, 1))
    b = rng.normal(size=(300, 1)) + 0.5
    assert tv_histogram(a, b, [(-4, 4)]) == tv_histogram(b, a, [(-4, 4)])
    perm = rng.permutation(400)
    assert tv_histogram(a[perm], b, [(-4, 4)]) == tv_histogram(a, b, [(-4, 4)])


def test_tv_matches_analytic_shift():
    # TV(N(0,1), N(1,1)) = 2 Phi(1/2) - 1
    rng = np.random.default_rng(2)
    a = rng.normal(size=(400_000, 1))
    b = rng.normal(size=(400_000, 1)) + 1.0
    got = tv_histogram(a, b, [(-5, 6)], bins=96)
    assert got == pytest.approx(2 * norm.cdf(0.5) - 1, abs=0.01)


def test_tv_overflow_mass_counted():
    # all of b sits beyond the right bound: TV must be 1, not 0
    a = np.zeros((100, 1)) + 0.5
    b = np.zeros((100, 1)) + 10.0
    assert tv_histogram(a, b, [(0, 1)]) == 1.0


def test_tv_2d_and_validation():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2000, 2))
    b = rng.normal(size=(2000, 2))
    v = tv_histogram(a, b, [(-4, 4), (-4, 4)], bins=16)
    assert 0.0 <= v < 0.5
    with pytest.raises(ValueError):
        tv_histogram(a, rng.normal(size=(10, 1)), [(-4, 4)])
    with pytest.raises(ValueError):
        tv_histogram(np.empty((0, 1)), b[:, :1], [(-4, 4)])
    with pytest.raises(ValueError):
        tv_histogram(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)),
                     [(-4, 4)] * 3)
    with pytest.raises(ValueError):
        tv_histogram(a, b, [(4, -4), (-4, 4)])
    with pytest.raises(ValueError):
        tv_histogram(a, b, [(-4, 4), (-4, 4)], bins=1)


def test_subopt_values_and_bound():
    xs = np.array([[1.0], [2.0], [3.0]])
    reward = lambda x: float(x[0])
    assert subopt(xs, reward, a=2.5) == pytest.approx(0.5)
    # affine rewards shift the gap affinely
    assert subopt(xs, lambda x: 2 * float(x[0]), a=5.0) == pytest.approx(1.0)
    with pytest.raises(ValidationFailure):
        subopt(xs, reward, a=2.5, reward_bound=2.0)
    with pytest.raises(ValueError):
        subopt(np.empty((0, 1)), reward, a=0.0)


def test_posterior_mean_error():
    xs = np.array([[1.0, 0.0], [3.0, 0.0]])
    assert posterior_mean_error(xs, [2.0, 1.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        posterior_mean_error(np.empty((0, 2)), [0.0, 0.0])


def test_rate_fit_exact_power_law():
    n = np.array([100.0, 400.0, 1600.0, 6400.0])
    err = 3.0 * n**-0.4
    slope, intercept, r2 = rate_fit(n, err)
    assert slope == pytest.approx(-0.4, abs=1e-12)
    assert intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert r2 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rate_fit([1.0, 2.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rate_fit([1.0, 2.0, 3.0], [1.0, -2.0, 3.0])


def test_estimate_row_format():
    row = estimate_row("risk", "abc123", 0.5, 0.01, 100, 7)
    assert ESTIMATE_HEADER.count(",") == row.count(",")
    parts = row.split(",")
    assert parts[0] == "risk" and parts[1] == "abc123"
    assert float(parts[2]) == 0.5 and int(parts[4]) == 100
