"""Posterior sampling for linear inverse problems y = H x + noise.

An observation y = H x0 + sigma * eps with eps ~ N(0, I) induces, along
the forward diffusion of x0, the Gaussian likelihood

    y | x_t ~ N(H x_t / alpha_t, sigma^2 I + (sigma_t^2 / alpha_t^2) H H^T)

because x0 | x_t decorrelates into x_t / alpha_t plus kernel noise that
H maps through.  Its log-gradient in x_t is added to the prior score
during reverse sampling; the covariance solve is done in the SVD basis
of H so only a diagonal system appears.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .schedule import alpha_sigma

log = logging.getLogger(__name__)

_COND_WARN = 1e12


@dataclass(frozen=True)
class LinearMeasurement:
    """Full-row-rank operator H (m, d) observed through N(0, sigma^2 I) noise."""

    H: np.ndarray
    sigma: float
    # SVD factors, filled in by __post_init__
    _u: np.ndarray = field(repr=False, default=None)
    _svals: np.ndarray = field(repr=False, default=None)
    _vt: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.ndim != 2:
            raise ValueError("H must be a 2-d array")
        m, d = H.shape
        if m > d:
            raise ValueError("H must have at most as many rows as columns")
        if not np.all(np.isfinite(H)):
            raise ValueError("H must be finite")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        u, svals, vt = np.linalg.svd(H, full_matrices=False)
        if svals[-1] <= 0 or svals[-1] < 1e-12 * svals[0]:
            raise ValueError("H is rank deficient")
        if svals[0] / svals[-1] > _COND_WARN:
            log.warning("measurement operator badly conditioned (cond = %.3g)",
                        svals[0] / svals[-1])
        # verify the factorization before trusting it
        if not np.allclose(u @ np.diag(svals) @ vt, H, atol=1e-10 * max(1.0, svals[0])):
            raise AssertionError("SVD reconstruction failed")
        if not np.allclose(u.T @ u, np.eye(m), atol=1e-10):
            raise AssertionError("SVD left factor not orthonormal")
        if not np.allclose(vt @ vt.T, np.eye(m), atol=1e-10):
            raise AssertionError("SVD right factor not orthonormal")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "_u", u)
        object.__setattr__(self, "_svals", svals)
        object.__setattr__(self, "_vt", vt)

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def likelihood_score(self, x, y, t, dense: bool = False):
        """Gradient in x of log N(y; H x / alpha_t, Sigma_t).

        Sigma_t = sigma^2 I + (sigma_t^2 / alpha_t^2) H H^T.  With x of
        shape (n, d) and t of shape (n,), returns (n, d).  The default
        route diagonalizes Sigma_t through the SVD of H; dense=True
        solves the (m, m) system directly and exists as a cross-check.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        t = np.asarray(t, dtype=float).reshape(-1)
        if y.shape[0] != self.m:
            raise ValueError(f"y must have {self.m} entries")
        alpha, sigma_t = alpha_sigma(t)
        ratio2 = (sigma_t / alpha) ** 2  # = expm1(t)
        resid = y[None, :] - x @ self.H.T / alpha[:, None]  # (n, m)
        if dense:
            sol = np.empty_like(resid)
            eye = np.eye(self.m)
            for i in range(x.shape[0]):
                cov = self.sigma**2 * eye + ratio2[i] * (self.H @ self.H.T)
                sol[i] = np.linalg.solve(cov, resid[i])
        else:
            coords = resid @ self._u  # components along left singular vectors
            denom = self.sigma**2 + ratio2[:, None] * self._svals[None, :] ** 2
            sol = (coords / denom) @ self._u.T
        return (sol @ self.H) / alpha[:, None]

    def gaussian_likelihood_score(self, x, y, t, prior_mean, prior_cov):
        """Exact gradient in x of log p_t(y | x_t) under a Gaussian prior on x0.

        likelihood_score inverts the forward kernel (x0 ~ x_t / alpha_t)
        and ignores the prior, which is only adequate when the
        eigenvalues of H H^T are small against sigma^2 or t is small.
        When x0 ~ N(mu_p, Sigma_p) the conditional x0 | x_t is Gaussian,
        so y | x_t ~ N(H m_t(x), H V_t H^T + sigma^2 I) in closed form:

            m_t(x) = mu_p + alpha_t Sigma_p A_t^{-1} (x - alpha_t mu_p)
            V_t    = Sigma_p - alpha_t^2 Sigma_p A_t^{-1} Sigma_p
            A_t    = alpha_t^2 Sigma_p + sigma_t^2 I

        This is the reference route for oracle sampling experiments.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        t = np.asarray(t, dtype=float).reshape(-1)
        mu = np.asarray(prior_mean, dtype=float).reshape(-1)
        cov = np.asarray(prior_cov, dtype=float)
        n, d = x.shape
        alpha, sigma_t = alpha_sigma(t)
        a_mats = alpha[:, None, None] ** 2 * cov[None] + sigma_t[:, None, None] ** 2 * np.eye(d)[None]
        # gain = d m_t / d x = alpha Sigma_p A^{-1}; A and Sigma_p symmetric
        gain = alpha[:, None, None] * np.swapaxes(
            np.linalg.solve(a_mats, np.broadcast_to(cov, (n, d, d))), 1, 2
        )
        m_t = mu[None, :] + np.einsum("nij,nj->ni", gain, x - alpha[:, None] * mu[None, :])
        v_t = cov[None] - alpha[:, None, None] * gain @ cov[None]
        resid = y[None, :] - m_t @ self.H.T
        c_mats = self.H[None] @ v_t @ self.H.T[None] + self.sigma**2 * np.eye(self.m)[None]
        weights = np.linalg.solve(c_mats, resid[..., None])[..., 0]
        # chain rule through m_t: grad = gain^T H^T C^{-1} resid
        return np.einsum("nij,nj->ni", np.swapaxes(gain, 1, 2), weights @ self.H)

    def to_json(self) -> str:
        return json.dumps({"H": self.H.tolist(), "sigma": self.sigma})

    @classmethod
    def from_json(cls, text: str) -> "LinearMeasurement":
        obj = json.loads(text)
        return cls(H=np.asarray(obj["H"], dtype=float), sigma=float(obj["sigma"]))


def guided_score(prior_score_fn, meas: LinearMeasurement, y_obs, gaussian_prior=None):
    """Score of the diffused posterior: prior score plus likelihood gradient.

    prior_score_fn(x, y, t) is called with y=None since the measurement,
    not a label, conditions the draw.  Pass gaussian_prior=(mean, cov)
    to route the likelihood through the exact conditional-Gaussian form
    instead of the kernel-inversion approximation.
    """
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)

    if gaussian_prior is None:
        def fn(x, y, t):
            return prior_score_fn(x, None, t) + meas.likelihood_score(x, y_obs, t)
    else:
        mu_p, cov_p = gaussian_prior

        def fn(x, y, t):
            return prior_score_fn(x, None, t) + meas.gaussian_likelihood_score(
                x, y_obs, t, mu_p, cov_p
            )

    return fn


def gaussian_posterior_oracle(prior_mean, prior_cov, meas: LinearMeasurement, y_obs):
    """Exact posterior (mean, cov) when the prior on x is N(mean, cov)."""
    mu = np.asarray(prior_mean, dtype=float).reshape(-1)
    cov = np.asarray(prior_cov, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float).reshape(-1)
    H = meas.H
    prec = np.linalg.inv(cov) + H.T @ H / meas.sigma**2
    post_cov = np.linalg.inv(prec)
    post_mean = post_cov @ (np.linalg.solve(cov, mu) + H.T @ y_obs / meas.sigma**2)
    return post_mean, post_cov
