"""Analytic conditional data distributions with closed-form diffusion.

The family is a Gaussian mixture whose weights are softmax-of-affine
functions of the guidance y and whose means are affine in y.  Every
quantity the rest of the package needs is available in closed form:

- the data density p(x|y),
- the diffused density p_t(x|y) (each component convolves exactly with
  the forward Gaussian kernel),
- the conditional score grad_x log p_t(x|y),
- the marginal (guidance-free) density and score, with the y-integral
  done by fixed Gauss-Legendre quadrature (d_y <= 1, exact at desk
  tolerances).

These serve as oracles for the constructive approximator, the trained
networks and the samplers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .schedule import alpha_sigma

_LOG_2PI = np.log(2.0 * np.pi)


def _as_2d(arr, dim, name):
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim == 0:
        a = a.reshape(1, 1) if dim == 1 else a.reshape(1, 0)
    if a.shape[1] != dim:
        raise ValueError(f"{name} has dimension {a.shape[1]}, expected {dim}")
    return a


@dataclass
class ConditionalGaussianMixture:
    """Mixture with y-dependent weights/means and fixed covariances.

    weights_k(y) = softmax_k(weight_slopes @ y + weight_offsets)
    means_k(y)   = mean_slopes[k] @ y + mean_offsets[k]

    c1, c2 declare the Gaussian envelope p(x|y) <= c1 exp(-c2 |x|^2 / 2);
    beta and holder_radius are informational smoothness metadata.
    """

    weight_slopes: np.ndarray   # (K, d_y)
    weight_offsets: np.ndarray  # (K,)
    mean_slopes: np.ndarray     # (K, d, d_y)
    mean_offsets: np.ndarray    # (K, d)
    covs: np.ndarray            # (K, d, d)
    c1: float
    c2: float
    beta: float = 2.0
    holder_radius: float = 1.0
    _y_quad_nodes: int = field(default=64, repr=False)

    def __post_init__(self):
        self.weight_slopes = np.atleast_2d(np.asarray(self.weight_slopes, dtype=float))
        self.weight_offsets = np.asarray(self.weight_offsets, dtype=float)
        self.mean_slopes = np.asarray(self.mean_slopes, dtype=float)
        self.mean_offsets = np.atleast_2d(np.asarray(self.mean_offsets, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float)
        if self.mean_slopes.ndim == 2:  # (K, d) given for d_y == 1
            self.mean_slopes = self.mean_slopes[:, :, None]
        k, d, d_y = self.mean_slopes.shape
        if self.covs.shape != (k, d, d):
            raise ValueError(f"covs shape {self.covs.shape} incompatible with (K,d)=({k},{d})")
        if self.weight_slopes.shape[1] != d_y and d_y > 0:
            raise ValueError("weight_slopes and mean_slopes disagree on d_y")
        eigs = np.linalg.eigvalsh(self.covs)
        if np.any(eigs <= 0):
            raise ValueError("all covariances must be positive definite")
        self._eig_range = (float(eigs.min()), float(eigs.max()))

    # -- basic shape info -------------------------------------------------
    @property
    def n_components(self) -> int:
        return self.mean_slopes.shape[0]

    @property
    def d(self) -> int:
        return self.mean_slopes.shape[1]

    @property
    def d_y(self) -> int:
        return self.mean_slopes.shape[2]

    def _check_y(self, y):
        y = _as_2d(y, self.d_y, "y")
        if self.d_y and (np.any(y < 0.0) or np.any(y > 1.0)):
            raise ValueError("guidance y must lie in the unit cube")
        return y

    # -- parameter maps ---------------------------------------------------
    def weights(self, y):
        """Mixture weights for each row of y, shape (m, K)."""
        y = self._check_y(y)
        logits = y @ self.weight_slopes.T + self.weight_offsets  # (m, K)
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    def means(self, y):
        """Component means for each row of y, shape (m, K, d)."""
        y = self._check_y(y)
        return np.einsum("kde,me->mkd", self.mean_slopes, y) + self.mean_offsets

    # -- densities and scores ---------------------------------------------
    def _component_logpdf(self, x, means, covs):
        """log N(x; means, covs): x (m,d), means (m,K,d), covs (K,d,d) -> (m,K)."""
        diff = x[:, None, :] - means  # (m, K, d)
        chol = np.linalg.cholesky(covs)  # (K, d, d)
        sol = np.stack(
            [np.linalg.solve(chol[k], diff[:, k, :].T) for k in range(covs.shape[0])],
            axis=0,
        )  # (K, d, m)
        quad = np.einsum("kdm,kdm->km", sol, sol).T  # (m, K)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)  # (K,)
        return -0.5 * (quad + logdet + self.d * _LOG_2PI)

    def _diffused_params(self, y, t):
        alpha, sigma = alpha_sigma(t)
        means = alpha * self.means(y)
        covs = alpha**2 * self.covs + sigma**2 * np.eye(self.d)
        return means, covs

    def log_density(self, x, y):
        x = _as_2d(x, self.d, "x")
        w = self.weights(y)
        logp = self._component_logpdf(x, np.broadcast_to(self.means(y), (x.shape[0], self.n_components, self.d)), self.covs)
        m = logp.max(axis=1, keepdims=True)
        return (m + np.log((w * np.exp(logp - m)).sum(axis=1, keepdims=True)))[:, 0]

    def density(self, x, y):
        """p(x|y); x may be (d,) or (m,d), y (d_y,) or (m,d_y)."""
        return np.exp(self.log_density(x, y))

    def diffused_density(self, x, y, t):
        """p_t(x|y): the exact Gaussian convolution of each component."""
        x = _as_2d(x, self.d, "x")
        w = self.weights(y)
        means, covs = self._diffused_params(y, t)
        means = np.broadcast_to(means, (x.shape[0], self.n_components, self.d))
        logp = self._component_logpdf(x, means, covs)
        m = logp.max(axis=1, keepdims=True)
        return np.exp(m[:, 0]) * (w * np.exp(logp - m)).sum(axis=1)

    def exact_score(self, x, y, t):
        """grad_x log p_t(x|y) via component responsibilities."""
        x = _as_2d(x, self.d, "x")
        w = self.weights(y)
        means, covs = self._diffused_params(y, t)
        means = np.broadcast_to(means, (x.shape[0], self.n_components, self.d))
        logp = self._component_logpdf(x, means, covs)
        m = logp.max(axis=1, keepdims=True)
        resp = w * np.exp(logp - m)
        resp = resp / resp.sum(axis=1, keepdims=True)  # (m, K)
        prec = np.linalg.inv(covs)  # (K, d, d)
        grad_k = -np.einsum("kde,mke->mkd", prec, x[:, None, :] - means)
        return np.einsum("mk,mkd->md", resp, grad_k)

    # -- marginal (tau = null) oracles -------------------------------------
    def _y_nodes(self):
        if self.d_y == 0:
            return np.zeros((1, 0)), np.ones(1)
        if self.d_y != 1:
            raise NotImplementedError("marginal oracles implemented for d_y <= 1")
        nodes, wts = np.polynomial.legendre.leggauss(self._y_quad_nodes)
        return (0.5 * (nodes + 1.0))[:, None], 0.5 * wts

    def marginal_diffused_density(self, x, t):
        """p_t(x) under y ~ Uniform, by Gauss-Legendre quadrature over y."""
        x = _as_2d(x, self.d, "x")
        ys, wts = self._y_nodes()
        acc = np.zeros(x.shape[0])
        for yrow, wq in zip(ys, wts):
            acc += wq * self.diffused_density(x, yrow, t)
        return acc

    def marginal_score(self, x, t):
        """grad_x log p_t(x) under y ~ Uniform."""
        x = _as_2d(x, self.d, "x")
        ys, wts = self._y_nodes()
        num = np.zeros_like(x)
        den = np.zeros(x.shape[0])
        for yrow, wq in zip(ys, wts):
            p = self.diffused_density(x, yrow, t)
            num += wq * p[:, None] * self.exact_score(x, yrow, t)
            den += wq * p
        return num / den[:, None]

    # -- sampling -----------------------------------------------------------
    def sample_conditional(self, y, rng: np.random.Generator):
        """One x draw per row of y."""
        y = self._check_y(y)
        w = self.weights(y)
        means = self.means(y)
        m = y.shape[0]
        u = rng.random(m)
        comp = (u[:, None] > np.cumsum(w, axis=1)).sum(axis=1)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((m, self.d))
        return means[np.arange(m), comp] + np.einsum("mde,me->md", chol[comp], z)

    # -- serialization -------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "family": "conditional_gaussian_mixture",
            "weight_slopes": self.weight_slopes.tolist(),
            "weight_offsets": self.weight_offsets.tolist(),
            "mean_slopes": self.mean_slopes.tolist(),
            "mean_offsets": self.mean_offsets.tolist(),
            "covs": self.covs.tolist(),
            "c1": self.c1,
            "c2": self.c2,
            "beta": self.beta,
            "holder_radius": self.holder_radius,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConditionalGaussianMixture":
        doc = json.loads(text)
        if doc.get("family") != "conditional_gaussian_mixture":
            raise ValueError("unrecognized density document")
        return cls(
            weight_slopes=np.array(doc["weight_slopes"], dtype=float),
            weight_offsets=np.array(doc["weight_offsets"], dtype=float),
            mean_slopes=np.array(doc["mean_slopes"], dtype=float),
            mean_offsets=np.array(doc["mean_offsets"], dtype=float),
            covs=np.array(doc["covs"], dtype=float),
            c1=float(doc["c1"]),
            c2=float(doc["c2"]),
            beta=float(doc.get("beta", 2.0)),
            holder_radius=float(doc.get("holder_radius", 1.0)),
        )


@dataclass
class FastRateDensitySpec:
    """Density of the form p(x|y) = f(x,y) exp(-c2 |x|^2 / 2) with f in [lower, upper]."""

    base: ConditionalGaussianMixture
    c2: float
    lower: float
    upper: float

    def f_value(self, x, y):
        """f(x,y) = p(x|y) exp(c2 |x|^2 / 2)."""
        x2 = _as_2d(x, self.base.d, "x")
        return self.base.density(x2, y) * np.exp(0.5 * self.c2 * (x2**2).sum(axis=1))


@dataclass
class AssumptionReport:
    envelope_max_violation: float
    envelope_pass: bool
    f_min: float | None = None
    f_max: float | None = None
    fast_rate_pass: bool | None = None

    @property
    def passed(self) -> bool:
        ok = self.envelope_pass
        if self.fast_rate_pass is not None:
            ok = ok and self.fast_rate_pass
        return ok


def _grid(radius, resolution, dim):
    axes = [np.linspace(-radius, radius, resolution)] * dim
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    return pts


def validate_assumptions(spec, grid_radius: float = 5.0, grid_resolution: int = 64) -> AssumptionReport:
    """Grid check of the Gaussian-envelope and bounded-ratio assumptions.

    Violations are reported, never raised.
    """
    if grid_radius <= 0 or grid_resolution <= 1:
        raise ValueError("need positive radius and resolution >= 2")
    base = spec.base if isinstance(spec, FastRateDensitySpec) else spec
    xs = _grid(grid_radius, grid_resolution, base.d)
    if base.d_y == 0:
        y_grid = np.zeros((1, 0))
    else:
        y_grid = _grid(0.5, 9, base.d_y) + 0.5  # nine points per axis over [0,1]

    worst = -np.inf
    for yrow in y_grid:
        p = base.density(xs, yrow)
        envelope = base.c1 * np.exp(-0.5 * base.c2 * (xs**2).sum(axis=1))
        worst = max(worst, float((p - envelope).max()))
    report = AssumptionReport(envelope_max_violation=worst, envelope_pass=worst <= 1e-12)

    if isinstance(spec, FastRateDensitySpec):
        fmin, fmax = np.inf, -np.inf
        for yrow in y_grid:
            f = spec.f_value(xs, yrow)
            fmin = min(fmin, float(f.min()))
            fmax = max(fmax, float(f.max()))
        report.f_min = fmin
        report.f_max = fmax
        report.fast_rate_pass = (fmin >= spec.lower - 1e-12) and (fmax <= spec.upper + 1e-12)
    return report


def sample_dataset(spec: ConditionalGaussianMixture, n: int, rng: np.random.Generator, y_law=None):
    """Draw (x_i, y_i) pairs; y ~ Uniform[0,1]^{d_y} unless y_law is given."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if y_law is None:
        ys = rng.random((n, spec.d_y))
    else:
        ys = np.asarray(y_law(rng, n), dtype=float).reshape(n, spec.d_y)
    xs = spec.sample_conditional(ys, rng)
    return xs, ys
