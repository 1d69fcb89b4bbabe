"""Numerical laboratory for conditional diffusion models.

Forward Ornstein-Uhlenbeck noising, exact Gaussian-mixture score
oracles, constructive diffused-local-polynomial score approximation,
denoising-score-matching training with classifier-free masking,
reverse-SDE sampling, linear inverse-problem guidance, and evaluation
metrics, tied together by a manifest-driven command line.
"""

from .densities import (
    AssumptionReport,
    ConditionalGaussianMixture,
    FastRateDensitySpec,
    sample_dataset,
    validate_assumptions,
)
from .diffused_poly import (
    DiffusedPolynomial,
    FastRateScore,
    PolyApproxConfig,
    fast_score_approx,
    g_moment,
)
from .errors import NumericalAbort, ValidationFailure
from .inverse import LinearMeasurement, gaussian_posterior_oracle, guided_score
from .metrics import (
    RiskEstimate,
    posterior_mean_error,
    rate_fit,
    score_risk,
    subopt,
    tv_histogram,
)
from .rng import derive_rng
from .sampler import BackwardConfig, SamplerAbort, backward_sample, batch_sample
from .schedule import DiffusionSchedule, alpha_sigma, kernel_score, perturb
from .score_net import ScoreNet, ScoreNetConfig, TrainConfig, train

__all__ = [
    "AssumptionReport",
    "BackwardConfig",
    "ConditionalGaussianMixture",
    "DiffusedPolynomial",
    "DiffusionSchedule",
    "FastRateDensitySpec",
    "FastRateScore",
    "LinearMeasurement",
    "NumericalAbort",
    "PolyApproxConfig",
    "RiskEstimate",
    "SamplerAbort",
    "ScoreNet",
    "ScoreNetConfig",
    "TrainConfig",
    "ValidationFailure",
    "alpha_sigma",
    "backward_sample",
    "batch_sample",
    "derive_rng",
    "fast_score_approx",
    "g_moment",
    "gaussian_posterior_oracle",
    "guided_score",
    "kernel_score",
    "perturb",
    "posterior_mean_error",
    "rate_fit",
    "sample_dataset",
    "score_risk",
    "subopt",
    "train",
    "tv_histogram",
    "validate_assumptions",
]
