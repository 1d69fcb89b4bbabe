"""Trainable tri-variate score network s(x, tau y, t) and its trainer.

A single fully connected trunk realizes both the conditional and the
unconditional score: when the mask is null, the guidance embedding row is
replaced by a learned null token.  Training minimizes the denoising
score-matching risk with a random mask signal (classifier-free guidance)
using manually backpropagated gradients and Adam, all in numpy, fully
deterministic under the seed.

The network output is parametrized as o(x, tau y, t) / sigma_t so the
regression target of the head is the O(1) noise direction rather than the
1/sigma_t^2 kernel score; an optional per-time clamp bounds the final
score magnitude.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import derive_rng
from .schedule import alpha_sigma

MASK_NULL = "null"
MASK_ID = "id"


@dataclass(frozen=True)
class ScoreNetConfig:
    width: int = 64
    depth: int = 2
    activation: str = "softplus"  # or "relu"
    clamp_mode: str = "none"      # "inv_sigma2", "inv_sigma", "none"
    clamp_scale: float = 3.0      # constant c in c sqrt(log N) / sigma_t^{1,2}
    clamp_log_n: float = 16.0     # N inside the sqrt(log N) factor
    mask_embedding_dim: int = 8
    time_features: int = 4        # Fourier pairs; alpha_t and sigma_t are always added
    output_scale: str = "inv_sigma"  # "inv_sigma" or "none"

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.activation not in ("softplus", "relu"):
            raise ValueError("activation must be softplus or relu")
        if self.clamp_mode not in ("inv_sigma2", "inv_sigma", "none"):
            raise ValueError("unknown clamp_mode")
        if self.clamp_mode != "none" and self.clamp_scale <= 0:
            raise ValueError("clamp_scale must be positive when clamping")


@dataclass(frozen=True)
class TrainConfig:
    n: int = 10_000
    batch: int = 128
    steps: int = 2000
    lr: float = 1e-3
    t_samples_per_datum: int = 1
    t0: float = 0.05
    T: float = 3.0
    seed: int = 0
    mask_rate: float = 0.5  # probability of the null mask per draw
    lr_final_factor: float = 1.0  # cosine decay of lr down to lr * this
    avg_last_frac: float = 0.0  # average weights over this final fraction of steps

    def __post_init__(self):
        if not 0 < self.t0 < self.T:
            raise ValueError("need 0 < t0 < T")
        if min(self.n, self.batch, self.steps, self.t_samples_per_datum) < 1:
            raise ValueError("all counts must be positive")
        if not 0 < self.lr_final_factor <= 1:
            raise ValueError("lr_final_factor must be in (0, 1]")
        if not 0.0 <= self.avg_last_frac <= 1.0:
            raise ValueError("avg_last_frac must be in [0, 1]")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")


def _act(cfg: ScoreNetConfig, z):
    if cfg.activation == "relu":
        return np.maximum(z, 0.0)
    # softplus, overflow-safe
    return np.logaddexp(0.0, z)


def _act_grad(cfg: ScoreNetConfig, z):
    if cfg.activation == "relu":
        return (z > 0).astype(float)
    return 1.0 / (1.0 + np.exp(-z))


class ScoreNet:
    """MLP score model; parameters live in an ordered dict of float64 arrays."""

    def __init__(self, d: int, d_y: int, cfg: ScoreNetConfig, t0: float, T: float,
                 init_rng: np.random.Generator | None = None):
        self.d, self.d_y, self.cfg = d, d_y, cfg
        self.t0, self.T = float(t0), float(T)
        self.n_tf = 2 + 2 * cfg.time_features
        self.in_dim = d + cfg.mask_embedding_dim + self.n_tf
        rng = init_rng if init_rng is not None else np.random.default_rng(0)
        p = {}
        p["y_embed_w"] = rng.standard_normal((cfg.mask_embedding_dim, d_y)) / max(1.0, math.sqrt(d_y))
        p["y_embed_b"] = np.zeros(cfg.mask_embedding_dim)
        p["null_token"] = rng.standard_normal(cfg.mask_embedding_dim) * 0.1
        dims = [self.in_dim] + [cfg.width] * cfg.depth
        for layer in range(cfg.depth):
            p[f"w{layer}"] = rng.standard_normal((dims[layer + 1], dims[layer])) * math.sqrt(2.0 / dims[layer])
            p[f"b{layer}"] = np.zeros(dims[layer + 1])
        p["head_w"] = np.zeros((d, cfg.width))  # zero head: initial score is identically 0
        p["head_b"] = np.zeros(d)
        self.params = p

    # -- feature construction --------------------------------------------------
    def _time_features(self, t):
        t = np.asarray(t, dtype=float)
        alpha, sigma = alpha_sigma(t)
        tn = (t - self.t0) / (self.T - self.t0)
        feats = [alpha, sigma]
        for f in range(1, self.cfg.time_features + 1):
            feats.append(np.sin(2.0 * math.pi * f * tn))
            feats.append(np.cos(2.0 * math.pi * f * tn))
        return np.stack(feats, axis=-1)

    def _embed(self, y, null_mask):
        """Guidance embedding rows; null rows carry the learned token."""
        m = null_mask.shape[0]
        e = np.tile(self.params["null_token"], (m, 1))
        keep = ~null_mask
        if np.any(keep):
            if y is None:
                raise ValueError("y required for rows with mask = id")
            e[keep] = y[keep] @ self.params["y_embed_w"].T + self.params["y_embed_b"]
        return e

    def _clamp_bound(self, t):
        cfg = self.cfg
        if cfg.clamp_mode == "none":
            return None
        _, sigma = alpha_sigma(np.asarray(t, dtype=float))
        c = cfg.clamp_scale * math.sqrt(math.log(cfg.clamp_log_n))
        power = 2 if cfg.clamp_mode == "inv_sigma2" else 1
        return c / sigma**power

    def _forward_core(self, x, e, tf, t, want_cache: bool = False):
        cfg = self.cfg
        feat = np.concatenate([x, e, tf], axis=1)
        h = feat
        pre = []
        post = [feat]
        for layer in range(cfg.depth):
            z = h @ self.params[f"w{layer}"].T + self.params[f"b{layer}"]
            pre.append(z)
            h = _act(cfg, z)
            post.append(h)
        o = h @ self.params["head_w"].T + self.params["head_b"]
        t = np.asarray(t, dtype=float)
        _, sigma = alpha_sigma(t)
        gain = (1.0 / sigma)[:, None] if cfg.output_scale == "inv_sigma" else np.ones((x.shape[0], 1))
        s_raw = o * gain
        bound = self._clamp_bound(t)
        if bound is None:
            s = s_raw
            inside = np.ones_like(s_raw, dtype=bool)
        else:
            b = bound[:, None]
            s = np.clip(s_raw, -b, b)
            inside = np.abs(s_raw) <= b
        if not want_cache:
            return s
        return s, {"pre": pre, "post": post, "gain": gain, "inside": inside}

    def forward(self, x, mask, y, t):
        """Score for a single mask value applied to the whole batch.

        mask is MASK_NULL or MASK_ID; t must lie in [t0, T].
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        if np.any(t_arr < self.t0 - 1e-12) or np.any(t_arr > self.T + 1e-12):
            raise ValueError(f"t outside [{self.t0}, {self.T}]")
        if mask == MASK_ID:
            if y is None:
                raise ValueError("y required for rows with mask = id")
            y = np.atleast_2d(np.asarray(y, dtype=float))
            null_mask = np.zeros(x.shape[0], dtype=bool)
        elif mask == MASK_NULL:
            null_mask = np.ones(x.shape[0], dtype=bool)
        else:
            raise ValueError("mask must be 'null' or 'id'")
        e = self._embed(y if mask == MASK_ID else None, null_mask)
        return self._forward_core(x, e, self._time_features(t_arr), t_arr)

    def __call__(self, x, y, t):
        """Callable score interface: y=None means the null branch."""
        if y is None:
            return self.forward(x, MASK_NULL, None, t)
        return self.forward(x, MASK_ID, y, t)

    # -- loss and gradient -------------------------------------------------------
    def loss_and_grad(self, batch, want_grad: bool = True):
        """Mean squared deviation to the kernel score on a prepared batch.

        batch: dict with x_noisy (m,d), target (m,d), y (m,d_y), null_mask (m,),
        t (m,).  Returns (loss, grads) with grads matching self.params.
        """
        x, target = batch["x_noisy"], batch["target"]
        t, null_mask = batch["t"], batch["null_mask"]
        m = x.shape[0]
        e = self._embed(batch.get("y"), null_mask)
        tf = self._time_features(t)
        s, cache = self._forward_core(x, e, tf, t, want_cache=True)
        resid = s - target
        loss = float((resid**2).sum() / m)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        if not want_grad:
            return loss, None

        cfg = self.cfg
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        do = (2.0 / m) * resid * cache["inside"] * cache["gain"]  # d loss / d o
        h_last = cache["post"][-1]
        grads["head_w"] = do.T @ h_last
        grads["head_b"] = do.sum(axis=0)
        dh = do @ self.params["head_w"]
        for layer in range(cfg.depth - 1, -1, -1):
            dz = dh * _act_grad(cfg, cache["pre"][layer])
            grads[f"w{layer}"] = dz.T @ cache["post"][layer]
            grads[f"b{layer}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"w{layer}"]
        dfeat = dh
        de = dfeat[:, self.d : self.d + cfg.mask_embedding_dim]
        if np.any(null_mask):
            grads["null_token"] = de[null_mask].sum(axis=0)
        keep = ~null_mask
        if np.any(keep):
            grads["y_embed_w"] = de[keep].T @ batch["y"][keep]
            grads["y_embed_b"] = de[keep].sum(axis=0)
        return loss, grads

    # -- serialization -------------------------------------------------------------
    def save_weights(self, path):
        """Flat portable format: name, shape, then little-endian float64 payload."""
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(self.params)))
            for name, arr in self.params.items():
                nb = name.encode("utf-8")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<q", dim))
                fh.write(arr.astype("<f8").tobytes())

    def load_weights(self, path):
        with open(path, "rb") as fh:
            (count,) = struct.unpack("<I", fh.read(4))
            for _ in range(count):
                (ln,) = struct.unpack("<I", fh.read(4))
                name = fh.read(ln).decode("utf-8")
                (nd,) = struct.unpack("<I", fh.read(4))
                shape = tuple(struct.unpack("<q", fh.read(8))[0] for _ in range(nd))
                arr = np.frombuffer(fh.read(8 * int(np.prod(shape, dtype=np.int64)) if shape else 8 * 1), dtype="<f8")
                if shape == ():
                    arr = arr[0]
                else:
                    arr = arr.reshape(shape)
                if name not in self.params:
                    raise ValueError(f"unknown tensor {name}")
                if self.params[name].shape != np.asarray(arr).shape:
                    raise ValueError(f"shape mismatch for {name}")
                self.params[name] = np.array(arr, dtype=float)


def _make_draws(net: ScoreNet, xs, ys, t_draws: int, rng: np.random.Generator,
                mask_rate: float = 0.5, stratified: bool = True):
    """(t, tau, x') triples for each datum; returns a prepared loss batch."""
    n, d = xs.shape
    reps = t_draws
    x0 = np.repeat(xs, reps, axis=0)
    y = np.repeat(ys, reps, axis=0)
    m = x0.shape[0]
    t0, T = net.t0, net.T
    if stratified:
        u = rng.random((n, reps))
        strata = (np.arange(reps)[None, :] + u) / reps
        t = (t0 + (T - t0) * strata).reshape(-1)
    else:
        t = t0 + (T - t0) * rng.random(m)
    null_mask = rng.random(m) < mask_rate
    alpha, sigma = alpha_sigma(t)
    z = rng.standard_normal((m, d))
    x_noisy = alpha[:, None] * x0 + sigma[:, None] * z
    target = -z / sigma[:, None]  # equals -(x' - alpha x0) / sigma^2
    return {"x_noisy": x_noisy, "target": target, "y": y, "null_mask": null_mask, "t": t}


def denoising_loss(score_fn, x, y, net: ScoreNet, t_draws: int, rng: np.random.Generator,
                   mask_rate: float = 0.5):
    """Monte Carlo denoising score-matching loss of one datum.

    score_fn(x_batch, y_batch_or_None, t_batch) -> scores; `net` supplies the
    time window and the draw construction.  A trained ScoreNet is itself a
    valid score_fn.
    """
    if t_draws < 1:
        raise ValueError("t_draws must be >= 1")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    batch = _make_draws(net, x, y, t_draws, rng, mask_rate)
    null_mask = batch["null_mask"]
    s = np.empty_like(batch["target"])
    if np.any(~null_mask):
        keep = ~null_mask
        s[keep] = score_fn(batch["x_noisy"][keep], batch["y"][keep], batch["t"][keep])
    if np.any(null_mask):
        s[null_mask] = score_fn(batch["x_noisy"][null_mask], None, batch["t"][null_mask])
    return float(((s - batch["target"]) ** 2).sum(axis=1).mean())


def empirical_risk(score_fn, xs, ys, net: ScoreNet, t_draws: int, seed: int,
                   indices=None, mask_rate: float = 0.5):
    """Mean denoising loss over a dataset with a per-datum seed schedule.

    Seeds travel with `indices` (defaults to 0..n-1), so permuting the
    dataset together with its indices leaves the value unchanged.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if xs.shape[0] == 0:
        raise ValueError("dataset must be nonempty")
    if indices is None:
        indices = range(xs.shape[0])
    vals = [
        denoising_loss(score_fn, xs[i], ys[i], net, t_draws, derive_rng(seed, int(idx)), mask_rate)
        for i, idx in enumerate(indices)
    ]
    return float(np.mean(vals))


@dataclass
class TrainResult:
    net: ScoreNet
    loss_trace: np.ndarray  # (steps,)

    def save_loss_trace(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(self.loss_trace):
                fh.write(f"{i},{v:.17g}\n")


def train(xs, ys, net_cfg: ScoreNetConfig, train_cfg: TrainConfig) -> TrainResult:
    """Adam on the classifier-free denoising objective; deterministic under seed."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n, d = xs.shape
    d_y = ys.shape[1]
    net = ScoreNet(d, d_y, net_cfg, train_cfg.t0, train_cfg.T,
                   init_rng=derive_rng(train_cfg.seed, 0))
    data_rng = derive_rng(train_cfg.seed, 1)
    mom = {k: np.zeros_like(v) for k, v in net.params.items()}
    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trace = np.empty(train_cfg.steps)
    # tail averaging: the mean of the iterates over the final stretch has
    # far less optimizer noise than the last iterate
    avg_from = train_cfg.steps - max(1, int(round(train_cfg.avg_last_frac * train_cfg.steps)))
    avg = {k: np.zeros_like(v) for k, v in net.params.items()} if train_cfg.avg_last_frac > 0 else None
    avg_count = 0
    for step in range(train_cfg.steps):
        idx = data_rng.integers(0, n, size=min(train_cfg.batch, n))
        batch = _make_draws(net, xs[idx], ys[idx], train_cfg.t_samples_per_datum,
                            data_rng, train_cfg.mask_rate)
        try:
            loss, grads = net.loss_and_grad(batch)
        except FloatingPointError as exc:
            raise RuntimeError(f"training diverged at step {step}: {exc}") from exc
        trace[step] = loss
        tcorr = step + 1
        frac = step / max(1, train_cfg.steps - 1)
        floor = train_cfg.lr_final_factor
        lr = train_cfg.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))
        for k, g in grads.items():
            mom[k] = beta1 * mom[k] + (1 - beta1) * g
            vel[k] = beta2 * vel[k] + (1 - beta2) * g**2
            mhat = mom[k] / (1 - beta1**tcorr)
            vhat = vel[k] / (1 - beta2**tcorr)
            net.params[k] -= lr * mhat / (np.sqrt(vhat) + eps)
        if avg is not None and step >= avg_from:
            avg_count += 1
            for k in avg:
                avg[k] += (net.params[k] - avg[k]) / avg_count
    if avg is not None:
        net.params = {k: v.copy() for k, v in avg.items()}
    if not np.all(np.isfinite(trace)):
        raise RuntimeError("training diverged: non-finite loss in trace")
    return TrainResult(net=net, loss_trace=trace)
