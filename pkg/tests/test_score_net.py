import math

import numpy as np
import pytest

from difflab.rng import derive_rng
from difflab.schedule import alpha_sigma, kernel_score
from difflab.score_net import (
    MASK_ID,
    MASK_NULL,
    ScoreNet,
    ScoreNetConfig,
    TrainConfig,
    _make_draws,
    denoising_loss,
    empirical_risk,
    train,
)


def small_net(seed=0, **cfg_kwargs):
    cfg = ScoreNetConfig(width=12, depth=2, mask_embedding_dim=4,
                         time_features=2, **cfg_kwargs)
    net = ScoreNet(d=2, d_y=1, cfg=cfg, t0=0.05, T=3.0,
                   init_rng=np.random.default_rng(seed))
    # the head starts at zero; give it signal so gradients reach every layer
    rng = np.random.default_rng(seed + 100)
    net.params["head_w"] = rng.standard_normal(net.params["head_w"].shape) * 0.3
    net.params["head_b"] = rng.standard_normal(net.params["head_b"].shape) * 0.1
    return net


def make_batch(net, m=16, seed=5):
    rng = np.random.default_rng(seed)
    xs = rng.normal(size=(m, net.d))
    ys = rng.random((m, net.d_y))
    return _make_draws(net, xs, ys, 1, rng, mask_rate=0.4)


def test_config_validation():
    with pytest.raises(ValueError):
        ScoreNetConfig(width=0)
    with pytest.raises(ValueError):
        ScoreNetConfig(activation="tanh")
    with pytest.raises(ValueError):
        ScoreNetConfig(clamp_mode="weird")
    with pytest.raises(ValueError):
        TrainConfig(t0=1.0, T=0.5)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_final_factor=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mask_rate=1.5)
    with pytest.raises(ValueError):
        TrainConfig(avg_last_frac=1.5)


def test_fresh_net_outputs_zero():
    cfg = ScoreNetConfig(width=8, depth=1)
    net = ScoreNet(2, 1, cfg, 0.05, 3.0, init_rng=np.random.default_rng(3))
    x = np.random.default_rng(0).normal(size=(7, 2))
    y = np.full((7, 1), 0.5)
    assert np.all(net(x, y, 1.0) == 0.0)
    assert np.all(net(x, None, 1.0) == 0.0)


def test_gradient_matches_finite_differences():
    net = small_net()
    batch = make_batch(net)
    _, grads = net.loss_and_grad(batch)
    rng = np.random.default_rng(9)
    h = 1e-6
    for name, arr in net.params.items():
        flat = arr.reshape(-1)
        for _ in range(4):
            i = int(rng.integers(flat.size))
            keep = flat[i]
            flat[i] = keep + h
            lp, _ = net.loss_and_grad(batch, want_grad=False)
            flat[i] = keep - h
            lm, _ = net.loss_and_grad(batch, want_grad=False)
            flat[i] = keep
            fd = (lp - lm) / (2 * h)
            assert grads[name].reshape(-1)[i] == pytest.approx(fd, rel=2e-5, abs=1e-9)


def test_null_branch_uses_token_not_y():
    net = small_net()
    x = np.random.default_rng(1).normal(size=(5, 2))
    y = np.full((5, 1), 0.3)
    s_null = net(x, None, 1.0)
    assert np.array_equal(s_null, net.forward(x, MASK_NULL, None, 1.0))
    s_id = net(x, y, 1.0)
    assert not np.allclose(s_null, s_id)
    # perturbing the null token moves only the null branch
    net.params["null_token"] = net.params["null_token"] + 0.5
    assert not np.allclose(net(x, None, 1.0), s_null)
    assert np.array_equal(net(x, y, 1.0), s_id)
    with pytest.raises(ValueError):
        net.forward(x, MASK_ID, None, 1.0)
    with pytest.raises(ValueError):
        net.forward(x, "other", y, 1.0)


def test_time_window_enforced():
    net = small_net()
    x = np.zeros((1, 2))
    y = np.zeros((1, 1))
    with pytest.raises(ValueError):
        net(x, y, 0.01)
    with pytest.raises(ValueError):
        net(x, y, 4.0)
    # batched t with one offender also rejected
    with pytest.raises(ValueError):
        net(np.zeros((2, 2)), np.zeros((2, 1)), np.array([1.0, 5.0]))


def test_clamp_bounds_output():
    net = small_net(clamp_mode="inv_sigma", clamp_scale=0.01)
    x = np.random.default_rng(2).normal(size=(20, 2)) * 3
    y = np.full((20, 1), 0.5)
    for t in (0.05, 0.5, 3.0):
        _, sigma = alpha_sigma(t)
        bound = 0.01 * math.sqrt(math.log(net.cfg.clamp_log_n)) / sigma
        assert np.all(np.abs(net(x, y, t)) <= bound + 1e-15)


def test_kernel_score_cheat_achieves_zero_loss():
    # with one training point x0, the regression target is exactly the
    # forward-kernel score around x0, so that oracle attains loss 0
    net = small_net()
    x0 = np.array([0.4, -0.7])
    y0 = np.array([0.5])

    def cheat(x, y, t):
        alpha, sigma = alpha_sigma(t)
        return -(x - alpha[:, None] * x0[None, :]) / sigma[:, None] ** 2

    loss = denoising_loss(cheat, x0, y0, net, t_draws=64,
                          rng=np.random.default_rng(0))
    assert loss == pytest.approx(0.0, abs=1e-20)


def test_zero_score_loss_matches_analytic_value():
    # s = 0 gives E ||z/sigma_t||^2 = d * E[1/sigma_t^2]; with t uniform on
    # [t0, T] the mean of 1/(1 - e^{-t}) integrates in closed form
    t0, T = 0.05, 3.0
    cfg = ScoreNetConfig(width=8, depth=1)
    net = ScoreNet(2, 1, cfg, t0, T, init_rng=np.random.default_rng(0))
    zero = lambda x, y, t: np.zeros_like(x)
    loss = denoising_loss(zero, np.array([0.3, -0.1]), np.array([0.5]), net,
                          t_draws=6000, rng=np.random.default_rng(1))
    ref = 2 * (math.log(math.expm1(T)) - math.log(math.expm1(t0))) / (T - t0)
    assert loss == pytest.approx(ref, rel=0.02)


def test_empirical_risk_permutation_invariant():
    net = small_net()
    rng = np.random.default_rng(6)
    xs = rng.normal(size=(8, 2))
    ys = rng.random((8, 1))
    base = empirical_risk(net, xs, ys, net, t_draws=3, seed=42)
    perm = np.array([3, 1, 7, 0, 5, 2, 6, 4])
    shuffled = empirical_risk(net, xs[perm], ys[perm], net, t_draws=3, seed=42,
                              indices=perm)
    assert shuffled == pytest.approx(base, rel=1e-14)
    with pytest.raises(ValueError):
        empirical_risk(net, np.empty((0, 2)), np.empty((0, 1)), net, 1, 0)
    with pytest.raises(ValueError):
        denoising_loss(net, xs[0], ys[0], net, t_draws=0,
                       rng=np.random.default_rng(0))


def test_make_draws_moments_and_target():
    net = small_net()
    rng = np.random.default_rng(8)
    xs = np.full((4000, 2), 1.5)
    ys = np.full((4000, 1), 0.5)
    batch = _make_draws(net, xs, ys, 1, rng, mask_rate=0.25)
    # target equals the kernel score of the drawn perturbation
    alpha, sigma = alpha_sigma(batch["t"])
    ref = -(batch["x_noisy"] - alpha[:, None] * xs) / sigma[:, None] ** 2
    assert np.allclose(batch["target"], ref, rtol=1e-12)
    assert batch["null_mask"].mean() == pytest.approx(0.25, abs=0.03)
    # stratified times cover the window roughly uniformly
    assert batch["t"].min() >= net.t0 and batch["t"].max() <= net.T
    assert batch["t"].mean() == pytest.approx((net.t0 + net.T) / 2, abs=0.05)


def test_training_is_deterministic_and_learns():
    rng = derive_rng(0, 0)
    ys = rng.random((400, 1))
    xs = ys + rng.standard_normal((400, 1))  # x | y ~ N(y, 1)
    net_cfg = ScoreNetConfig(width=16, depth=2)
    train_cfg = TrainConfig(n=400, batch=64, steps=250, lr=3e-3, seed=11)
    r1 = train(xs, ys, net_cfg, train_cfg)
    r2 = train(xs, ys, net_cfg, train_cfg)
    assert np.array_equal(r1.loss_trace, r2.loss_trace)
    for k in r1.net.params:
        assert np.array_equal(r1.net.params[k], r2.net.params[k])
    # the minibatch loss has a large variance floor; compare averages
    assert np.mean(r1.loss_trace[-50:]) < 0.7 * np.mean(r1.loss_trace[:50])


def test_trained_net_tracks_gaussian_score():
    # x | y ~ N(y, 1): the diffused conditional score is
    # -(x - alpha y) / (sigma^2 + alpha^2)
    rng = derive_rng(1, 0)
    ys = rng.random((3000, 1))
    xs = ys + rng.standard_normal((3000, 1))
    res = train(xs, ys, ScoreNetConfig(width=32, depth=2),
                TrainConfig(n=3000, batch=128, steps=1200, lr=3e-3, seed=4,
                            lr_final_factor=0.1))
    t = 1.0
    alpha, sigma = alpha_sigma(t)
    grid = np.linspace(-2, 2, 21)[:, None]
    y = np.full((21, 1), 0.5)
    got = res.net(grid, y, t)[:, 0]
    ref = -(grid[:, 0] - alpha * 0.5) / (sigma**2 + alpha**2)
    assert np.max(np.abs(got - ref)) < 0.25


def test_tail_averaging_is_deterministic_and_distinct():
    rng = derive_rng(5, 0)
    ys = rng.random((200, 1))
    xs = ys + rng.standard_normal((200, 1))
    cfg = ScoreNetConfig(width=8, depth=1)
    plain = train(xs, ys, cfg, TrainConfig(n=200, batch=64, steps=60, seed=3))
    avg1 = train(xs, ys, cfg, TrainConfig(n=200, batch=64, steps=60, seed=3,
                                          avg_last_frac=0.5))
    avg2 = train(xs, ys, cfg, TrainConfig(n=200, batch=64, steps=60, seed=3,
                                          avg_last_frac=0.5))
    # averaging changes the final weights but stays fully reproducible
    assert not np.array_equal(plain.net.params["w0"], avg1.net.params["w0"])
    for k in avg1.net.params:
        assert np.array_equal(avg1.net.params[k], avg2.net.params[k])
    # the loss traces agree: averaging only affects the returned weights
    assert np.array_equal(plain.loss_trace, avg1.loss_trace)


def test_divergence_reported():
    rng = derive_rng(2, 0)
    ys = rng.random((64, 1))
    xs = rng.standard_normal((64, 1))
    with pytest.raises(RuntimeError, match="diverged"):
        train(xs, ys, ScoreNetConfig(width=8, depth=2),
              TrainConfig(n=64, batch=32, steps=400, lr=1e200, seed=0))


def test_save_load_roundtrip(tmp_path):
    net = small_net(seed=7)
    x = np.random.default_rng(0).normal(size=(6, 2))
    y = np.random.default_rng(1).random((6, 1))
    before = net(x, y, 0.8)
    path = tmp_path / "weights.bin"
    net.save_weights(path)
    other = small_net(seed=99)
    assert not np.allclose(other(x, y, 0.8), before)
    other.load_weights(path)
    assert np.array_equal(other(x, y, 0.8), before)
    # mismatched architecture is rejected
    wrong = ScoreNet(2, 1, ScoreNetConfig(width=6, depth=1), 0.05, 3.0)
    with pytest.raises(ValueError):
        wrong.load_weights(path)


def test_loss_trace_csv(tmp_path):
    rng = derive_rng(3, 0)
    ys = rng.random((64, 1))
    xs = rng.standard_normal((64, 1))
    res = train(xs, ys, ScoreNetConfig(width=8, depth=1),
                TrainConfig(n=64, batch=32, steps=20, seed=0))
    out = tmp_path / "trace.csv"
    res.save_loss_trace(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 21
    assert float(lines[1].split(",")[1]) == res.loss_trace[0]
