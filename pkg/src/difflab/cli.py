"""Manifest-driven experiment runner.

A manifest is a small YAML document naming the experiment kind, the
density, the schedule, and the sweep axis.  Every random stream used by
a sweep cell derives from the master seed and a stable hash of
(experiment kind, cell indices), so cells reproduce independently of
sweep order or --jobs, and a re-run of the same manifest produces
byte-identical CSV files.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import densities, metrics
from .densities import ConditionalGaussianMixture, sample_dataset, validate_assumptions
from .diffused_poly import DiffusedPolynomial, FastRateScore, PolyApproxConfig
from .errors import NumericalAbort, ValidationFailure
from .inverse import LinearMeasurement, gaussian_posterior_oracle, guided_score
from .metrics import rate_fit, score_risk, subopt, tv_histogram
from .rng import derive_rng
from .sampler import BackwardConfig, batch_sample
from .score_net import ScoreNetConfig, TrainConfig, train

KINDS = ("approx-rate", "train-risk", "tv-sweep", "inverse", "reward")
SEED_RULE = "kind-cell-v1"


# --------------------------------------------------------------------------
# manifest handling

def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValidationFailure("manifest must be a mapping")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise ValidationFailure(f"kind must be one of {KINDS}, got {kind!r}")
    seeds = doc.setdefault("seeds", {})
    seeds.setdefault("master", 0)
    seeds.setdefault("rule", SEED_RULE)
    if seeds["rule"] != SEED_RULE:
        raise ValidationFailure(f"unknown seed derivation rule {seeds['rule']!r}")
    doc.setdefault("out", "results")
    return doc


def manifest_hash(doc: dict) -> str:
    """sha256 of the manifest content, excluding the output location."""
    payload = {k: v for k, v in doc.items() if k != "out"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def cell_seed(master: int, kind: str, *cell) -> int:
    """Stable 64-bit seed for one sweep cell."""
    tag = f"{kind}:{master}:" + ":".join(str(c) for c in cell)
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


# --------------------------------------------------------------------------
# densities available by name in manifests

def _mixture(weight_slopes, weight_offsets, mean_slopes, mean_offsets, covs,
             c1, c2, **kw):
    return ConditionalGaussianMixture(
        weight_slopes=np.asarray(weight_slopes, dtype=float),
        weight_offsets=np.asarray(weight_offsets, dtype=float),
        mean_slopes=np.asarray(mean_slopes, dtype=float),
        mean_offsets=np.asarray(mean_offsets, dtype=float),
        covs=np.asarray(covs, dtype=float), c1=c1, c2=c2, **kw)


def builtin_density(name: str) -> ConditionalGaussianMixture:
    if name == "unit_gaussian_given_y":
        # x | y ~ N(y, 1), y ~ Uniform[0, 1]
        return _mixture([[0.0]], [0.0], [[[1.0]]], [[0.0]], [[[1.0]]],
                        c1=1.0, c2=0.4)
    if name == "narrow_gaussian_given_y":
        # x | y ~ N(y, 0.25)
        return _mixture([[0.0]], [0.0], [[[1.0]]], [[0.0]], [[[0.25]]],
                        c1=1.0, c2=0.4)
    if name == "four_bump_given_y":
        # four narrow bumps whose weights move with y: enough structure
        # that network estimation error dominates the optimization floor
        return _mixture([[2.0], [-2.0], [1.0], [-1.0]], [0.0] * 4,
                        [[[0.5]], [[0.5]], [[0.5]], [[0.5]]],
                        [[-1.5], [-0.5], [0.5], [1.5]],
                        np.full((4, 1, 1), 0.09), c1=2.5, c2=0.3)
    if name == "bimodal_prior_1d":
        # smooth two-bump prior on x, no y dependence (d_y = 1, unused)
        return _mixture([[0.0], [0.0]], [0.0, 0.0],
                        [[[0.0]], [[0.0]]], [[-0.8], [0.9]],
                        [[[0.35]], [[0.45]]], c1=1.2, c2=0.5)
    raise ValidationFailure(f"unknown builtin density {name!r}")


def density_from_manifest(doc: dict) -> ConditionalGaussianMixture:
    dspec = doc.get("density")
    if isinstance(dspec, str):
        return builtin_density(dspec)
    if isinstance(dspec, dict) and "builtin" in dspec:
        return builtin_density(dspec["builtin"])
    if isinstance(dspec, dict):
        return _mixture(**dspec)
    raise ValidationFailure("manifest must name or define a density")


# --------------------------------------------------------------------------
# CSV helpers

def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv(path: Path, header: list, rows: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# --------------------------------------------------------------------------
# experiment runners

def _schedule(doc, t0_default=0.05, T_default=3.0):
    sch = doc.get("schedule", {})
    return float(sch.get("t0", t0_default)), float(sch.get("T", T_default))


def _poly_error_cell(args):
    """Weighted-L2 score error of the constructive approximator at one (N, t)."""
    doc, n_grid, t, seed = args
    spec = density_from_manifest(doc)
    cfg_kw = doc.get("approx", {})
    mode = cfg_kw.get("mode", "forward")
    cfg = PolyApproxConfig(grid_n=n_grid, beta=float(cfg_kw.get("beta", 2.0)),
                           taylor_order=int(cfg_kw.get("taylor_order", 2)))
    if mode == "fast":
        c2 = float(cfg_kw.get("c2", spec.c2))
        fast_spec = densities.FastRateDensitySpec(
            base=spec, c2=c2,
            lower=float(cfg_kw.get("lower", 1e-3)),
            upper=float(cfg_kw.get("upper", 1e3)))
        approx = FastRateScore(fast_spec, cfg)
        cand = lambda x, y, t_: approx.score(x, y, t_)
    else:
        poly = DiffusedPolynomial(spec, cfg, mode="forward")
        cand = lambda x, y, t_: poly.score_approx(x, y, t_)
    rng = derive_rng(seed, 0)
    ev = doc.get("eval", {})
    draws = int(ev.get("risk_draws", 2048))
    y_grid = np.atleast_2d(np.asarray(ev.get("y_points", [[0.5] * spec.d_y]), dtype=float))
    from .schedule import alpha_sigma
    alpha, sigma = alpha_sigma(t)
    # the approximator lives on its evaluation cube; the error is the
    # weighted L2 deviation over that region, averaged over the y grid
    half = cfg.cube_radius()
    errs = []
    for yrow in y_grid:
        xs = spec.sample_conditional(np.tile(yrow, (draws, 1)), rng)
        x_t = alpha * xs + sigma * rng.standard_normal(xs.shape)
        x_t = x_t[np.all(np.abs(x_t) <= half, axis=1)]
        if x_t.shape[0] == 0:
            raise NumericalAbort(
                f"no evaluation draws inside the cube at N={n_grid}, t={t}")
        errs.append(np.sum((cand(x_t, yrow, t)
                            - spec.exact_score(x_t, yrow, t)) ** 2, axis=1))
    err = np.concatenate(errs)
    return float(err.mean()), float(err.std(ddof=1) / np.sqrt(err.size))


def run_approx_rate(doc: dict, out: Path, jobs: int = 1) -> int:
    h = manifest_hash(doc)
    master = int(doc["seeds"]["master"])
    n_list = [int(n) for n in doc.get("sweep", {}).get("N", [4, 8, 16, 32])]
    if n_list != sorted(n_list):
        raise ValidationFailure("N list must be ascending")
    t_list = [float(t) for t in doc.get("eval", {}).get("t_values", [0.25, 1.0, 3.0])]
    tasks, keys = [], []
    for i, n_grid in enumerate(n_list):
        for j, t in enumerate(t_list):
            tasks.append((doc, n_grid, t, cell_seed(master, doc["kind"], i, j)))
            keys.append((n_grid, t, cell_seed(master, doc["kind"], i, j)))
    results = _run_cells(_poly_error_cell, tasks, jobs)
    rows = [[h, n, t, err, se, seed]
            for (n, t, seed), (err, se) in zip(keys, results)]
    write_csv(out / "approx_rate.csv",
              ["manifest_hash", "N", "t", "error", "std_error", "seed"], rows)
    if len(n_list) >= 3:
        summary = []
        for j, t in enumerate(t_list):
            errs = [results[i * len(t_list) + j][0] for i in range(len(n_list))]
            slope, intercept, r2 = rate_fit(n_list, errs)
            summary.append([h, t, slope, intercept, r2])
        write_csv(out / "approx_rate_summary.csv",
                  ["manifest_hash", "t", "slope", "intercept", "r_squared"], summary)
    return 0


def _train_cell(doc, n, seed):
    spec = density_from_manifest(doc)
    t0, T = _schedule(doc)
    tr = doc.get("train", {})
    net_cfg = ScoreNetConfig(width=int(tr.get("width", 48)),
                             depth=int(tr.get("depth", 2)))
    # steps_per_datum scales the optimization budget with the dataset so
    # every sweep cell sees the same number of passes over its data;
    # opt_seed pins the initialization and batch order across cells so
    # sweeps compare training sets, not optimizer luck
    if "steps_per_datum" in tr:
        steps = max(1, int(round(float(tr["steps_per_datum"]) * n)))
    else:
        steps = int(tr.get("steps", 1500))
    train_cfg = TrainConfig(n=n, batch=int(tr.get("batch", 128)),
                            steps=steps,
                            lr=float(tr.get("lr", 2e-3)),
                            lr_final_factor=float(tr.get("lr_final_factor", 1.0)),
                            avg_last_frac=float(tr.get("avg_last_frac", 0.0)),
                            t0=t0, T=T, seed=int(tr.get("opt_seed", seed)))
    data_rng = derive_rng(seed, 10)
    xs, ys = sample_dataset(spec, n, data_rng)
    result = train(xs, ys, net_cfg, train_cfg)
    return spec, result.net, t0, T


def _risk_cell(args):
    doc, n, seed = args
    spec, net, t0, T = _train_cell(doc, n, seed)
    oracle = lambda x, y, t: spec.exact_score(x, y, t)
    est = score_risk(net, oracle, spec, t0, T,
                     int(doc.get("eval", {}).get("risk_draws", 4096)),
                     derive_rng(seed, 20))
    return est.value, est.mc_std_error


def run_train_risk(doc: dict, out: Path, jobs: int = 1) -> int:
    h = manifest_hash(doc)
    master = int(doc["seeds"]["master"])
    n_list = [int(n) for n in doc.get("sweep", {}).get("n", [500, 2000, 8000])]
    if n_list != sorted(n_list):
        raise ValidationFailure("n list must be ascending")
    seeds_per = int(doc.get("sweep", {}).get("seeds_per_cell", 3))
    tasks, keys = [], []
    for i, n in enumerate(n_list):
        for r in range(seeds_per):
            seed = cell_seed(master, doc["kind"], i, r)
            tasks.append((doc, n, seed))
            keys.append((n, r, seed))
    results = _run_cells(_risk_cell, tasks, jobs)
    rows = [[h, n, r, risk, se, seed]
            for (n, r, seed), (risk, se) in zip(keys, results)]
    write_csv(out / "train_risk.csv",
              ["manifest_hash", "n", "replicate", "risk", "std_error", "seed"], rows)
    means = [float(np.mean([results[i * seeds_per + r][0] for r in range(seeds_per)]))
             for i in range(len(n_list))]
    summary = [[h, n, m] for n, m in zip(n_list, means)]
    write_csv(out / "train_risk_summary.csv",
              ["manifest_hash", "n", "mean_risk"], summary)
    if len(n_list) >= 3:
        slope, intercept, r2 = rate_fit(n_list, means)
        write_csv(out / "train_risk_fit.csv",
                  ["manifest_hash", "slope", "intercept", "r_squared"],
                  [[h, slope, intercept, r2]])
    return 0


def _tv_cell(args):
    doc, n, seed = args
    spec, net, t0, T = _train_cell(doc, n, seed)
    sam = doc.get("sampler", {})
    cfg = BackwardConfig(T=T, t0=t0, steps=int(sam.get("steps", 300)),
                         grid=sam.get("grid", "geometric"))
    ev = doc.get("eval", {})
    count = int(ev.get("tv_samples", 6000))
    bins = int(ev.get("tv_bins", 64))
    y_grid = [float(v) for v in ev.get("y_grid", [0.1 * k for k in range(1, 10)])]
    if not y_grid:
        raise ValidationFailure("y grid must be nonempty")
    bounds = ev.get("tv_bounds")
    tvs = []
    for gi, yv in enumerate(y_grid):
        y = np.array([yv])
        trained = batch_sample(lambda x, y_, t: net(x, np.broadcast_to(y, (x.shape[0], 1)), t),
                               None, cfg, count, derive_rng(seed, 30, gi).integers(2**63), d=spec.d)
        ref = batch_sample(lambda x, y_, t: spec.exact_score(x, y, float(t[0])),
                           None, cfg, count, derive_rng(seed, 31, gi).integers(2**63), d=spec.d)
        if bounds is None:
            lo = float(min(ref.min(), trained.min()))
            hi = float(max(ref.max(), trained.max()))
            cell_bounds = [(np.floor(lo * 2) / 2, np.ceil(hi * 2) / 2)]
        else:
            cell_bounds = [tuple(map(float, b)) for b in np.atleast_2d(bounds)]
        tvs.append(tv_histogram(trained, ref, cell_bounds, bins))
    return tvs


def run_tv_sweep(doc: dict, out: Path, jobs: int = 1) -> int:
    h = manifest_hash(doc)
    master = int(doc["seeds"]["master"])
    n_list = [int(n) for n in doc.get("sweep", {}).get("n", [500, 2000, 8000])]
    y_grid = [float(v) for v in doc.get("eval", {}).get(
        "y_grid", [0.1 * k for k in range(1, 10)])]
    tasks, keys = [], []
    for i, n in enumerate(n_list):
        seed = cell_seed(master, doc["kind"], i)
        tasks.append((doc, n, seed))
        keys.append((n, seed))
    results = _run_cells(_tv_cell, tasks, jobs)
    rows = []
    for (n, seed), tvs in zip(keys, results):
        for yv, tv in zip(y_grid, tvs):
            rows.append([h, n, yv, tv, seed])
    write_csv(out / "tv_sweep.csv",
              ["manifest_hash", "n", "y", "tv", "seed"], rows)
    summary = [[h, n, float(np.mean(tvs))] for (n, _), tvs in zip(keys, results)]
    write_csv(out / "tv_sweep_summary.csv", ["manifest_hash", "n", "mean_tv"], summary)
    return 0


def run_inverse(doc: dict, out: Path, jobs: int = 1) -> int:
    h = manifest_hash(doc)
    master = int(doc["seeds"]["master"])
    seed = cell_seed(master, doc["kind"], 0)
    inv = doc.get("inverse", {})
    H = np.atleast_2d(np.asarray(inv.get("H", [[1.0, 0.0]]), dtype=float))
    sigma = float(inv.get("sigma", 0.5))
    y_star = np.asarray(inv.get("y_star", [1.0]), dtype=float).reshape(-1)
    mu_p = np.asarray(inv.get("prior_mean", np.zeros(H.shape[1])), dtype=float)
    cov_p = np.asarray(inv.get("prior_cov", np.eye(H.shape[1])), dtype=float)
    meas = LinearMeasurement(H=H, sigma=sigma)
    sam = doc.get("sampler", {})
    cfg = BackwardConfig(T=float(sam.get("T", 5.0)), t0=float(sam.get("t0", 0.01)),
                         steps=int(sam.get("steps", 500)),
                         grid=sam.get("grid", "geometric"))
    count = int(doc.get("eval", {}).get("samples", 10000))
    chol = np.linalg.cholesky(cov_p)

    def prior_score(x, y, t):
        from .schedule import alpha_sigma
        alpha, sigma_t = alpha_sigma(t)
        covs = alpha[:, None, None] ** 2 * cov_p[None] \
            + sigma_t[:, None, None] ** 2 * np.eye(len(mu_p))[None]
        diff = x - alpha[:, None] * mu_p[None, :]
        return -np.linalg.solve(covs, diff[..., None])[..., 0]

    fn = guided_score(prior_score, meas, y_star, gaussian_prior=(mu_p, cov_p))
    xs = batch_sample(fn, None, cfg, count, seed, d=H.shape[1])
    pm, pc = gaussian_posterior_oracle(mu_p, cov_p, meas, y_star)
    mean_err = metrics.posterior_mean_error(xs, pm)
    ref = pm + derive_rng(seed, 1).standard_normal((count, len(pm))) @ np.linalg.cholesky(pc).T
    rows = [[h, "posterior_mean_error", mean_err, seed]]
    for i in range(len(pm)):
        sd = float(np.sqrt(pc[i, i]))
        tv = tv_histogram(xs[:, i], ref[:, i], [(pm[i] - 6 * sd, pm[i] + 6 * sd)],
                          int(doc.get("eval", {}).get("tv_bins", 64)))
        rows.append([h, f"marginal_tv_{i}", tv, seed])
        rows.append([h, f"mean_abs_err_{i}", float(abs(xs[:, i].mean() - pm[i])), seed])
    write_csv(out / "inverse.csv", ["manifest_hash", "quantity", "value", "seed"], rows)
    return 0


def run_reward(doc: dict, out: Path, jobs: int = 1) -> int:
    h = manifest_hash(doc)
    master = int(doc["seeds"]["master"])
    seed = cell_seed(master, doc["kind"], 0)
    spec = density_from_manifest(doc)
    t0, T = _schedule(doc)
    rw = doc.get("reward", {})
    a = float(rw.get("target", 0.5))
    bound = float(rw.get("bound", 10.0))
    reward = lambda x: float(np.clip(x[0], -bound, bound))
    sam = doc.get("sampler", {})
    cfg = BackwardConfig(T=T, t0=t0, steps=int(sam.get("steps", 400)),
                         grid=sam.get("grid", "geometric"))
    count = int(doc.get("eval", {}).get("samples", 10000))
    y = np.array([a])
    exact = batch_sample(lambda x, y_, t: spec.exact_score(x, y, float(t[0])),
                         None, cfg, count, seed, d=spec.d)
    rows = [[h, "exact", subopt(exact, reward, a, reward_bound=bound), seed]]
    tr = doc.get("train", {})
    if tr.get("enabled", True):
        n = int(tr.get("n", 10000))
        tseed = cell_seed(master, doc["kind"], 1)
        _, net, _, _ = _train_cell(doc, n, tseed)
        trained = batch_sample(lambda x, y_, t: net(x, np.broadcast_to(y, (x.shape[0], 1)), t),
                               None, cfg, count, tseed, d=spec.d)
        rows.append([h, "trained", subopt(trained, reward, a, reward_bound=bound), tseed])
    write_csv(out / "reward.csv", ["manifest_hash", "sampler", "subopt", "seed"], rows)
    return 0


def run_validate(doc: dict, out: Path, jobs: int = 1) -> int:
    spec = density_from_manifest(doc)
    report = validate_assumptions(spec)
    h = manifest_hash(doc)
    rows = [
        [h, "gaussian_envelope", int(report.envelope_pass),
         report.envelope_max_violation],
    ]
    if report.fast_rate_pass is not None:
        rows.append([h, "f_lower", int(report.fast_rate_pass), report.f_min])
        rows.append([h, "f_upper", int(report.fast_rate_pass), report.f_max])
    write_csv(out / "validate.csv",
              ["manifest_hash", "check", "passed", "value"], rows)
    if not report.passed:
        raise ValidationFailure("assumption checks failed; see validate.csv")
    return 0


def _run_cells(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# --------------------------------------------------------------------------
# plots: pure functions of the CSVs

def plot_csv(csv_path: Path, svg_path: Path, x_col: str, y_col: str,
             logx: bool = True, logy: bool = True):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "difflab"
    with open(csv_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = [line.strip().split(",") for line in fh if line.strip()]
    xi, yi = header.index(x_col), header.index(y_col)
    xs = [float(r[xi]) for r in data]
    ys = [float(r[yi]) for r in data]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, "o-", ms=4)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(x_col)
    ax.set_ylabel(y_col)
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)


_PLOT_SPECS = {
    "approx-rate": ("approx_rate.csv", "N", "error"),
    "train-risk": ("train_risk.csv", "n", "risk"),
    "tv-sweep": ("tv_sweep_summary.csv", "n", "mean_tv"),
}


# --------------------------------------------------------------------------
# entry point

_RUNNERS = {
    "approx-rate": run_approx_rate,
    "train-risk": run_train_risk,
    "tv-sweep": run_tv_sweep,
    "inverse": run_inverse,
    "reward": run_reward,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="difflab",
                                     description="conditional diffusion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_RUNNERS) + ["validate"]:
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--plots", action="store_true")
    args = parser.parse_args(argv)
    try:
        doc = load_manifest(args.manifest)
        if args.command != "validate" and doc["kind"] != args.command:
            raise ValidationFailure(
                f"manifest kind {doc['kind']!r} does not match subcommand {args.command!r}")
        if args.seed is not None:
            doc["seeds"]["master"] = int(args.seed)
        out = Path(args.out) if args.out is not None else Path(doc["out"])
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "validate":
            run_validate(doc, out, args.jobs)
        else:
            _RUNNERS[args.command](doc, out, args.jobs)
            if args.plots and args.command in _PLOT_SPECS:
                csv_name, x_col, y_col = _PLOT_SPECS[args.command]
                plot_csv(out / csv_name, out / (csv_name[:-4] + ".svg"), x_col, y_col)
    except ValidationFailure as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
