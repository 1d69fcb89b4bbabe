"""Constructive score approximation by diffused local polynomials.

The data density is Taylor-expanded on a trapezoid partition of unity
over a truncated, rescaled cube; pushing each local monomial through the
forward Gaussian kernel gives a closed-form basis function (a product of
clipped Gaussian moments).  Assembled, these yield

- ``density_approx`` (f1): an approximation of the diffused density,
- ``grad_approx`` (f2): an approximation of sigma_t * grad of it,
- ``score_approx`` (f3): the clipped ratio f2 / (sigma_t * max(f1, eps_low)),
  clamped at a per-time envelope bound.

A second kernel mode supports densities of the form
p = f * exp(-c2 |x|^2 / 2) with f bounded away from zero: the score then
splits into an exact linear term plus grad h / h, where h is a Gaussian
smoothing of f under a modified (alpha_hat, sigma_hat) schedule, and the
same polynomial machinery approximates h without any low-density clipping.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .densities import ConditionalGaussianMixture, FastRateDensitySpec
from .schedule import alpha_sigma

# central finite-difference stencils on integer offsets, per derivative order
_FD_STENCILS = {
    0: ((0,), (1.0,)),
    1: ((-1, 0, 1), (-0.5, 0.0, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 0, 1, 2), (-0.5, 1.0, 0.0, -1.0, 0.5)),
    4: ((-2, -1, 0, 1, 2), (1.0, -4.0, 6.0, -4.0, 1.0)),
}


@dataclass(frozen=True)
class PolyApproxConfig:
    """Resolution and truncation knobs of the approximator.

    grid_n        N, cells per axis
    taylor_order  s, local Taylor degree (floor of the smoothness index)
    beta          smoothness index driving the default radii
    exp_order     p, degree of the exponential Taylor expansion;
                  default ceil(4 beta log N), capped at 60 to keep
                  factorial-scale intermediates inside double precision
    trunc_radius  R, half of it is the clip half-width of the moment
                  integrals; default 2 sqrt(2 beta log N)
    cube_mult     Cx; evaluation cube is [-Cx sqrt(log N), Cx sqrt(log N)]^d
    eps_low       density clip; None means calibrate from the oracle
    fd_step       finite-difference step on the rescaled unit domain
    """

    grid_n: int
    taylor_order: int = 2
    beta: float = 2.0
    exp_order: int | None = None
    trunc_radius: float | None = None
    cube_mult: float | None = None
    eps_low: float | None = None
    fd_step: float = 1e-3

    def __post_init__(self):
        if self.grid_n < 2:
            raise ValueError("grid_n must be >= 2")
        if self.taylor_order < 0 or self.taylor_order > 4:
            raise ValueError("taylor_order must be in 0..4")
        if self.exp_order is not None and self.exp_order < 1:
            raise ValueError("exp_order must be >= 1")
        if self.eps_low is not None and not (0.0 < self.eps_low < 1.0):
            raise ValueError("eps_low must be in (0, 1)")

    @property
    def p(self) -> int:
        if self.exp_order is not None:
            return self.exp_order
        return min(60, max(4, math.ceil(4.0 * self.beta * math.log(self.grid_n))))

    @property
    def radius(self) -> float:
        if self.trunc_radius is not None:
            return self.trunc_radius
        return 2.0 * math.sqrt(2.0 * self.beta * math.log(self.grid_n))

    @property
    def cx(self) -> float:
        if self.cube_mult is not None:
            return self.cube_mult
        return math.sqrt(2.0 * self.beta)

    def cube_radius(self) -> float:
        return self.cx * math.sqrt(math.log(self.grid_n))


def trapezoid(a):
    """Piecewise-linear bump: 1 on |a|<1, slope down to 0 on 1<=|a|<=2."""
    a = np.abs(np.asarray(a, dtype=float))
    return np.clip(2.0 - a, 0.0, 1.0)


def multi_indices(dims: int, max_total: int):
    """All multi-indices over `dims` axes with |n|_1 <= max_total."""
    out = []
    for total in range(max_total + 1):
        for combo in itertools.product(range(total + 1), repeat=dims):
            if sum(combo) == total:
                out.append(combo)
    return out


def taylor_coeffs(func, center, order: int, step: float = 1e-3):
    """Taylor coefficients d^n f / n! at `center` by central finite differences.

    `func` maps a batch of points (m, dims) to values (m,).  Returns a dict
    multi-index -> coefficient.  All derivatives for one center share a
    single tensor-product stencil grid of function evaluations.
    """
    center = np.asarray(center, dtype=float)
    dims = center.size
    offsets = np.arange(-2, 3)
    pts = center + step * np.stack(
        np.meshgrid(*([offsets] * dims), indexing="ij"), axis=-1
    ).reshape(-1, dims)
    vals = np.asarray(func(pts), dtype=float).reshape((5,) * dims)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite function values in finite-difference stencil")

    def stencil_vector(m):
        w = np.zeros(5)
        for o, c in zip(*_FD_STENCILS[m]):
            w[o + 2] = c
        return w / step**m

    coeffs = {}
    for mi in multi_indices(dims, order):
        acc = vals
        for m in mi:  # contract leading axis each time
            acc = np.tensordot(stencil_vector(m), acc, axes=([0], [0]))
        deriv = float(acc)
        if not np.isfinite(deriv):
            raise ValueError(f"non-finite derivative estimate for index {mi}")
        fact = 1.0
        for m in mi:
            fact *= math.factorial(m)
        coeffs[mi] = deriv / fact
    return coeffs


def hat_schedule(t, c2: float):
    """Modified (alpha_hat, sigma_hat) for densities with a exp(-c2|x|^2/2) factor."""
    if c2 <= 0:
        raise ValueError("c2 must be positive")
    alpha, sigma = alpha_sigma(t)
    denom = alpha**2 + c2 * sigma**2
    return alpha / denom, sigma / np.sqrt(denom)


def _exp_taylor_weights(p: int):
    # (-1)^k / (2^k k!) for k < p
    k = np.arange(p)
    w = np.empty(p)
    for i in k:
        w[i] = (-1.0) ** i / (2.0**i * math.factorial(int(i)))
    return w


def g_moment(x: float, n: int, v: int, k: int, t: float, cfg: PolyApproxConfig) -> float:
    """Closed-form clipped Gaussian moment of one diffused local monomial axis.

    Integrates (z/R + 1/2 - v/N)^n (1/k!) (-(x - alpha_t z)^2 / (2 sigma_t^2))^k
    over the cell ((v-1)/N, v/N] (in rescaled coordinates) intersected with the
    moving window |x - alpha_t z| <= sigma_t R/2, normalized by sigma_t sqrt(2 pi).
    Empty intersections give 0.
    """
    if t <= 0:
        raise ValueError("g_moment requires t > 0")
    alpha, sigma = alpha_sigma(t)
    N, R = cfg.grid_n, cfg.radius
    hw = R / 2.0
    # substitution u = (alpha z - x) / sigma
    zl = ((v - 1) / N - 0.5) * R
    zu = (v / N - 0.5) * R
    lo = max((alpha * zl - x) / sigma, -hw)
    hi = min((alpha * zu - x) / sigma, hw)
    if hi <= lo:
        return 0.0
    a = x / (alpha * R) + 0.5 - v / N
    b = sigma / (alpha * R)
    pref = 1.0 / (alpha * math.sqrt(2.0 * math.pi))
    ck = (-1.0) ** k / (2.0**k * math.factorial(k))
    total = 0.0
    for j in range(n + 1):
        m = 2 * k + j
        total += math.comb(n, j) * a ** (n - j) * b**j * (hi ** (m + 1) - lo ** (m + 1)) / (m + 1)
    return pref * ck * total


class DiffusedPolynomial:
    """Coefficient table plus closed-form evaluators f1 / f2 / f3.

    mode="forward": approximates p_t(x|y) from Taylor data of p(x|y).
    mode="hat":     approximates the smoothed ratio factor h(x,y,t) of a
                    FastRateDensitySpec from Taylor data of f(x,y).
    """

    def __init__(self, spec, cfg: PolyApproxConfig, mode: str = "forward",
                 calibrate: bool = True):
        if mode not in ("forward", "hat"):
            raise ValueError("mode must be 'forward' or 'hat'")
        self.mode = mode
        self.cfg = cfg
        if mode == "hat":
            if not isinstance(spec, FastRateDensitySpec):
                raise TypeError("hat mode requires a FastRateDensitySpec")
            self.spec = spec
            self.base = spec.base
            self.c2 = spec.c2
        else:
            if isinstance(spec, FastRateDensitySpec):
                spec = spec.base
            self.spec = spec
            self.base = spec
            self.c2 = None
        self.d = self.base.d
        self.d_y = self.base.d_y
        if self.d > 2 or self.d_y > 1:
            raise ValueError("diffused polynomials are restricted to d <= 2, d_y <= 1")
        # the hat kernel needs a wider clip window: the score there is a
        # ratio of unclipped integrals, so boundary truncation must stay
        # below the target resolution over the whole evaluation cube
        if cfg.trunc_radius is not None:
            self.radius = cfg.trunc_radius
        elif mode == "hat":
            c2p = self.c2 / (2.0 * max(1.0, self.c2))
            self.radius = 2.0 * math.sqrt((2.0 * cfg.beta / c2p) * math.log(cfg.grid_n))
        else:
            self.radius = cfg.radius
        if cfg.exp_order is not None:
            self.p = cfg.exp_order
        else:
            half = self.radius / 2.0
            self.p = min(60, math.ceil(math.e * half**2 / 2.0 + 12.0))
        self._build_table()
        self.c5 = None
        self.eps_low = cfg.eps_low
        if calibrate and mode == "forward":
            self._calibrate()

    # -- construction -------------------------------------------------------
    def _rescaled_target(self, pts):
        """Target function on the unit cube: x axes rescaled by R, y axes raw."""
        R = self.radius
        x = R * (pts[:, : self.d] - 0.5)
        y = pts[:, self.d :]
        if self.mode == "hat":
            return self.spec.f_value(x, np.clip(y, 0.0, 1.0))
        return self.base.density(x, np.clip(y, 0.0, 1.0))

    def _build_table(self):
        N = self.cfg.grid_n
        s = self.cfg.taylor_order
        d, d_y = self.d, self.d_y
        self.mi_list = multi_indices(d + d_y, s)  # (n..., n'...) combined
        self.x_cells = list(itertools.product(range(1, N + 1), repeat=d))
        # y grid extended to {0..N} so the trapezoid factors sum to one on [0,1]
        self.y_cells = list(itertools.product(range(0, N + 1), repeat=d_y)) if d_y else [()]

        n_x, n_w, n_mi = len(self.x_cells), len(self.y_cells), len(self.mi_list)
        table = np.zeros((n_x, n_w, n_mi))
        step = self.cfg.fd_step
        for ix, v in enumerate(self.x_cells):
            for iw, w in enumerate(self.y_cells):
                center = np.array([vi / N for vi in v] + [wi / N for wi in w])
                coeffs = taylor_coeffs(self._rescaled_target, center, s, step)
                for im, mi in enumerate(self.mi_list):
                    table[ix, iw, im] = coeffs[mi]
        if not np.all(np.isfinite(table)):
            raise ValueError("non-finite Taylor coefficient in table")
        self.table = table

    def _calibrate(self, t_values=(0.25, 1.0, 3.0), n_grid: int = 41):
        """Fit eps_low (2x the measured sup |f1 - p_t|) and the clamp constant."""
        r = self.cfg.cube_radius()
        axes = [np.linspace(-r, r, n_grid)] * self.d
        xs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        ys = np.linspace(0.2, 0.8, 3)[:, None] if self.d_y else np.zeros((1, 0))
        sup_err = 0.0
        c5 = 0.0
        for t in t_values:
            _, sigma = alpha_sigma(t)
            for yrow in ys:
                f1 = self.density_approx(xs, yrow, t)
                pt = self.base.diffused_density(xs, yrow, t)
                sup_err = max(sup_err, float(np.abs(f1 - pt).max()))
                sc = self.base.exact_score(xs, yrow, t)
                ratio = sigma**2 * np.abs(sc).max(axis=1) / (np.linalg.norm(xs, axis=1) + 1.0)
                c5 = max(c5, float(ratio.max()))
        if self.eps_low is None:
            self.eps_low = max(2.0 * sup_err, 1e-12)
        self.c5 = 1.5 * c5

    # -- per-axis moment machinery -------------------------------------------
    def _axis_moment_sums(self, xcol, t, max_order: int, extra: int):
        """Sum over k < p of the closed-form axis moments.

        xcol: (m,) axis values. Returns (m, max_order+1, N): entry [., n, v-1]
        is sum_k g(x, n, v, k) with `extra` additional powers of the
        standardized variable (extra=1 builds the gradient monomials).
        """
        N, R, p = self.cfg.grid_n, self.radius, self.p
        hw = R / 2.0
        x = np.asarray(xcol, dtype=float)[:, None]  # (m, 1)
        v = np.arange(1, N + 1)[None, :]  # (1, N)
        zl = ((v - 1) / N - 0.5) * R
        zu = (v / N - 0.5) * R
        if self.mode == "forward":
            alpha, sigma = alpha_sigma(t)
            lo = (alpha * zl - x) / sigma
            hi = (alpha * zu - x) / sigma
            a = x / (alpha * R) + 0.5 - v / N
            b = sigma / (alpha * R)
            pref = 1.0 / (alpha * math.sqrt(2.0 * math.pi))
        else:
            ah, sh = hat_schedule(t, self.c2)
            lo = (zl - ah * x) / sh
            hi = (zu - ah * x) / sh
            a = ah * x / R + 0.5 - v / N
            b = sh / R
            pref = 1.0 / math.sqrt(2.0 * math.pi)
        lo = np.clip(lo, -hw, hw)
        hi = np.clip(hi, -hw, hw)
        hi = np.maximum(hi, lo)

        mmax = 2 * (p - 1) + max_order + extra
        exps = np.arange(mmax + 2)  # need powers up to mmax+1
        powers_hi = hi[:, :, None] ** exps  # (m, N, mmax+2)
        powers_lo = lo[:, :, None] ** exps
        moments = (powers_hi[:, :, 1:] - powers_lo[:, :, 1:]) / exps[1:]  # (m, N, mmax+1)

        ck = _exp_taylor_weights(p)  # (p,)
        # S_j = sum_k ck * moment[2k + j + extra], j = 0..max_order
        S = np.empty((x.shape[0], N, max_order + 1))
        for j in range(max_order + 1):
            idx = 2 * np.arange(p) + j + extra
            S[:, :, j] = np.einsum("k,mnk->mn", ck, moments[:, :, idx])

        out = np.empty((x.shape[0], max_order + 1, N))
        for n in range(max_order + 1):
            acc = np.zeros((x.shape[0], N))
            for j in range(n + 1):
                acc += math.comb(n, j) * a ** (n - j) * b**j * S[:, :, j]
            out[:, n, :] = pref * acc
        return out

    def _check_domain(self, x, y):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.d:
            raise ValueError(f"x must have dimension {self.d}")
        r = self.cfg.cube_radius()
        if np.any(np.abs(x) > r + 1e-12):
            raise ValueError(f"evaluation outside the cube of radius {r:.4g}")
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.d_y:
            raise ValueError(f"y must have dimension {self.d_y}")
        if self.d_y and (np.any(y < 0.0) or np.any(y > 1.0)):
            raise ValueError("y must lie in the unit cube")
        return x, y

    def _y_factors(self, y):
        """(n_w, n_mi) array of (y - w/N)^{n'} * trapezoid factors."""
        N = self.cfg.grid_n
        s = self.cfg.taylor_order
        d, d_y = self.d, self.d_y
        n_w, n_mi = len(self.y_cells), len(self.mi_list)
        out = np.ones((n_w, n_mi))
        if d_y == 0:
            return out
        for iw, w in enumerate(self.y_cells):
            psi = 1.0
            for j in range(d_y):
                psi *= float(trapezoid(3.0 * N * (y[j] - w[j] / N)))
            if psi == 0.0:
                out[iw, :] = 0.0
                continue
            for im, mi in enumerate(self.mi_list):
                val = psi
                for j in range(d_y):
                    npow = mi[d + j]
                    if npow:
                        val *= (y[j] - w[j] / N) ** npow
                out[iw, im] = val
        return out

    def _assemble(self, x, y, t, grad_axis: int | None):
        """Evaluate f1 (grad_axis None) or one coordinate of f2."""
        if t <= 0:
            raise ValueError("evaluation requires t > 0")
        d = self.d
        s = self.cfg.taylor_order
        m = x.shape[0]
        G = [
            self._axis_moment_sums(x[:, i], t, s, extra=1 if i == grad_axis else 0)
            for i in range(d)
        ]
        yf = self._y_factors(y)  # (n_w, n_mi)
        total = np.zeros(m)
        for im, mi in enumerate(self.mi_list):
            xpart = G[0][:, mi[0], :]  # (m, N)
            for i in range(1, d):
                xpart = xpart[:, :, None] * G[i][:, mi[i], :][:, None, :]
                xpart = xpart.reshape(m, -1)
            # table: (n_x, n_w, n_mi); yf: (n_w, n_mi)
            total += xpart @ (self.table[:, :, im] @ yf[:, im])
        return total

    # -- public evaluators -----------------------------------------------------
    def density_approx(self, x, y, t):
        """f1: diffused-polynomial approximation of p_t(x|y) (or of h in hat mode)."""
        x, y = self._check_domain(x, y)
        return self._assemble(x, y, t, grad_axis=None)

    def grad_approx(self, x, y, t):
        """f2: approximation of sigma_t grad p_t (forward) or (sigma/alpha-hat) grad h."""
        x, y = self._check_domain(x, y)
        cols = [self._assemble(x, y, t, grad_axis=i) for i in range(self.d)]
        return np.stack(cols, axis=1)

    def clamp_bound(self, t) -> float:
        """Per-time envelope bound (C5 / sigma_t^2)(Cx sqrt(d log N) + 1)."""
        if self.c5 is None:
            raise RuntimeError("clamp constant not calibrated")
        _, sigma = alpha_sigma(t)
        cfg = self.cfg
        return float(self.c5 / sigma**2 * (cfg.cx * math.sqrt(self.d * math.log(cfg.grid_n)) + 1.0))

    def score_approx(self, x, y, t):
        """f3: clipped-ratio score approximation of grad log p_t(x|y)."""
        if self.mode != "forward":
            raise RuntimeError("score_approx applies to forward mode; use FastRateScore")
        if self.eps_low is None:
            raise RuntimeError("eps_low not set; construct with calibrate=True or set cfg.eps_low")
        x, y = self._check_domain(x, y)
        _, sigma = alpha_sigma(t)
        f1 = np.maximum(self._assemble(x, y, t, grad_axis=None), self.eps_low)
        f2 = np.stack([self._assemble(x, y, t, grad_axis=i) for i in range(self.d)], axis=1)
        bound = self.clamp_bound(t)
        return np.clip(f2 / (sigma * f1[:, None]), -bound, bound)

    # -- export -----------------------------------------------------------------
    def export_coefficients_csv(self, path):
        """Coefficient table as (v..., w..., n..., n'..., coefficient) rows."""
        d, d_y = self.d, self.d_y
        header = (
            [f"v{i}" for i in range(d)]
            + [f"w{j}" for j in range(d_y)]
            + [f"n{i}" for i in range(d)]
            + [f"np{j}" for j in range(d_y)]
            + ["coefficient"]
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for ix, v in enumerate(self.x_cells):
                for iw, w in enumerate(self.y_cells):
                    for im, mi in enumerate(self.mi_list):
                        cells = list(v) + list(w) + list(mi)
                        fh.write(
                            ",".join(str(c) for c in cells)
                            + f",{self.table[ix, iw, im]:.17g}\n"
                        )


class FastRateScore:
    """Score approximator for FastRateDensitySpec via the linear + grad h / h split.

    score = -c2 x / (alpha^2 + c2 sigma^2) + (alpha_hat / sigma_hat) f2 / f1
    where f1, f2 are diffused-polynomial approximations of h and
    (sigma_hat / alpha_hat) grad h built under the hat schedule.  f1 is
    lower-bounded defensively at lower/2 (no eps_low clipping needed since
    f >= lower).
    """

    def __init__(self, spec: FastRateDensitySpec, cfg: PolyApproxConfig):
        self.spec = spec
        self.poly = DiffusedPolynomial(spec, cfg, mode="hat", calibrate=False)

    def __call__(self, x, y, t):
        return self.score(x, y, t)

    def score(self, x, y, t):
        alpha, sigma = alpha_sigma(t)
        denom = alpha**2 + self.spec.c2 * sigma**2
        ah, sh = hat_schedule(t, self.spec.c2)
        x2, y1 = self.poly._check_domain(x, y)
        f1 = np.maximum(self.poly.density_approx(x2, y1, t), self.spec.lower / 2.0)
        f2 = self.poly.grad_approx(x2, y1, t)
        return -self.spec.c2 * x2 / denom + (ah / sh) * f2 / f1[:, None]


def fast_score_approx(spec: FastRateDensitySpec, cfg: PolyApproxConfig, x, y, t):
    """One-shot convenience wrapper around FastRateScore (rebuilds the table)."""
    return FastRateScore(spec, cfg).score(x, y, t)
