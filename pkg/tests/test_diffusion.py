import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathdiff import diffusion as dif
from pathdiff import tensor as T
from pathdiff.errors import ConfigError, ContractError, DimensionError
from pathdiff.verify import gaussian_eps_oracle, gaussian_sampling


def test_two_step_schedule_by_hand():
    s = dif.build_schedule(2, 0.1, 0.2)
    assert np.allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)
    assert np.allclose(s.sigma, np.sqrt([0.1, 0.2]))


def test_desk_schedule_end_value():
    s = dif.build_schedule(1000)
    assert s.alpha_bar[-1] < 1e-4
    # frozen from an independent float64 product of (1 - beta)
    beta = np.linspace(1e-4, 0.02, 1000)
    assert s.alpha_bar[-1] == pytest.approx(np.prod(1 - beta), rel=1e-12)
    assert s.alpha_bar[-1] == pytest.approx(4.035e-05, rel=1e-3)


@given(st.integers(2, 400), st.floats(1e-5, 0.3), st.floats(0.0, 0.5))
def test_alpha_bar_strictly_decreasing(n, b0, spread):
    b1 = min(0.99, b0 + spread)
    s = dif.build_schedule(n, b0, b1)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_bad_schedule_is_config_error(args):
    with pytest.raises(ConfigError):
        dif.build_schedule(*args)


def test_posterior_sigma_option():
    s = dif.build_schedule(10, sigma="posterior")
    expected = np.sqrt(s.beta[1:] * (1 - s.alpha_bar[:-1]) / (1 - s.alpha_bar[1:]))
    assert np.allclose(s.sigma[1:], expected)


def test_q_sample_limits(rng):
    x0 = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    clean = dif.NoiseSchedule(1, np.zeros(1), np.ones(1), np.ones(1), np.zeros(1))
    assert np.array_equal(dif.q_sample(x0, 1, eps, clean), x0)
    noisy = dif.schedule_from_alpha_bar([0.5, 1e-12])
    assert np.allclose(dif.q_sample(x0, 2, eps, noisy), eps, atol=1e-5)


def test_q_sample_shape_mismatch(rng):
    s = dif.build_schedule(10)
    with pytest.raises(DimensionError):
        dif.q_sample(np.zeros(3), 1, np.zeros(4), s)
    with pytest.raises(ContractError):
        dif.q_sample(np.zeros(3), 11, np.zeros(3), s)


def test_forward_moments_at_half():
    s = dif.schedule_from_alpha_bar([0.5])
    r = np.random.default_rng(11)
    n = 100_000
    xt = dif.q_sample(np.full(n, 0.8), 1, r.standard_normal(n), s)
    se = np.sqrt(0.5 / n)
    assert abs(xt.mean() - np.sqrt(0.5) * 0.8) < 3 * se
    assert abs(xt.var() / 0.5 - 1) < 0.02


def test_ddpm_step_reductions(rng):
    s = dif.build_schedule(20)
    x = rng.standard_normal(4)
    out = dif.ddpm_step(x, 5, np.zeros(4), np.zeros(4), s)
    assert np.allclose(out, x / np.sqrt(s.alpha[4]))
    # z is ignored at t = 1
    z = rng.standard_normal(4)
    assert np.array_equal(dif.ddpm_step(x, 1, np.zeros(4), z, s), dif.ddpm_step(x, 1, np.zeros(4), 0 * z, s))
    with pytest.raises(ContractError):
        dif.ddpm_step(x, 0, x, x, s)


def test_ddpm_step_with_unit_alpha():
    s = dif.NoiseSchedule(2, np.array([0.1, 0.0]), np.array([0.9, 1.0]), np.array([0.9, 0.9]),
                          np.array([0.3, 0.0]))
    x = np.array([0.3, -1.2])
    assert np.array_equal(dif.ddpm_step(x, 2, np.ones(2), np.zeros(2), s), x)


def test_ddim_step_properties(rng):
    s = dif.build_schedule(100)
    x0 = rng.standard_normal(6)
    eps = rng.standard_normal(6)
    xt = dif.q_sample(x0, 40, eps, s)
    assert np.allclose(dif.predict_x0(xt, 40, eps, s), x0, atol=1e-10)
    # perfect noise prediction lands exactly on q_sample at the earlier step
    assert np.allclose(dif.ddim_step(xt, 40, 10, eps, s), dif.q_sample(x0, 10, eps, s), atol=1e-10)
    assert np.allclose(dif.ddim_step(xt, 40, 0, eps, s), x0, atol=1e-10)
    with pytest.raises(ContractError):
        dif.ddim_step(xt, 40, 40, eps, s)


def test_ddim_step_equal_alpha_bar_keeps_x(rng):
    s = dif.NoiseSchedule(2, np.array([0.1, 1e-300]), np.array([0.9, 1.0]), np.array([0.9, 0.9]),
                          np.array([0.3, 0.0]))
    x = rng.standard_normal(3)
    assert np.allclose(dif.ddim_step(x, 2, 1, rng.standard_normal(3), s), x, atol=1e-12)


def test_ddim_timesteps():
    assert dif.ddim_timesteps(1000, 4) == [1000, 459, 126, 1]
    assert dif.ddim_timesteps(1000, 5, "linear") == [1000, 750, 500, 251, 1]
    ts = dif.ddim_timesteps(1000, 1000)
    assert ts == list(range(1000, 0, -1))
    with pytest.raises(ContractError):
        dif.ddim_timesteps(10, 11)


@given(st.integers(2, 1000), st.data())
def test_ddim_timesteps_strictly_decreasing(T_steps, data):
    steps = data.draw(st.integers(1, T_steps))
    for spacing in ("linear", "quadratic"):
        ts = dif.ddim_timesteps(T_steps, steps, spacing)
        assert len(ts) == steps and ts[0] == T_steps and ts[-1] >= 1
        assert all(a > b for a, b in zip(ts, ts[1:]))


def test_cfg_examples():
    a, b = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    assert dif.cfg_combine(a, b, 1.0) is a
    assert dif.cfg_combine(a, b, 0.0) is b
    assert dif.cfg_combine(1.0, 0.0, 4.5) == 4.5


vec = arrays(np.float64, 4, elements=st.floats(-100, 100))


@given(vec, vec, st.floats(-10, 10), st.floats(-10, 10))
def test_cfg_is_affine(a, b, w1, w2):
    left = dif.cfg_combine(a, b, w1) + dif.cfg_combine(a, b, w2)
    right = 2 * dif.cfg_combine(a, b, (w1 + w2) / 2)
    assert np.allclose(left, right, atol=1e-9, rtol=1e-9)


def test_gaussian_oracle_matches_posterior_mean():
    # E[eps | x_t] by Monte-Carlo binning agrees with the closed form
    r = np.random.default_rng(0)
    mu, s2, ab = 0.5, 0.25, 0.3
    x0 = mu + np.sqrt(s2) * r.standard_normal(400_000)
    eps = r.standard_normal(x0.size)
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    sel = np.abs(xt - 0.2) < 0.01
    assert eps[sel].mean() == pytest.approx(gaussian_eps_oracle(0.2, ab, mu, s2), abs=0.03)


@pytest.mark.parametrize("mu,s2", [(0.5, 0.25), (-1.0, 0.04), (2.0, 1.0)])
def test_gaussian_oracle_sampling(mu, s2):
    m, v = gaussian_sampling(10_000, mu, s2, "ddpm")
    assert abs(m / mu - 1) < 0.05 and abs(v / s2 - 1) < 0.10
    md, vd = gaussian_sampling(10_000, mu, s2, "ddim", steps=50)
    assert abs(md / mu - 1) < 0.05 and abs(vd / s2 - 1) < 0.10


@pytest.mark.parametrize("mu,s2", [(0.5, 0.25), (2.0, 1.0)])
def test_ddim_moments_track_ddpm(mu, s2):
    m, v = gaussian_sampling(10_000, mu, s2, "ddpm")
    md, vd = gaussian_sampling(10_000, mu, s2, "ddim", steps=50)
    assert abs(md / m - 1) < 0.10 and abs(vd / v - 1) < 0.10


def test_denoise_loss_examples(rng):
    s = dif.build_schedule(10)
    x0 = rng.standard_normal((3, 4, 4))
    eps = rng.standard_normal((3, 4, 4))
    perfect = dif.denoise_loss(lambda x, c, t: eps, x0, None, 5, eps, s)
    assert perfect.item() == 0.0
    zero = dif.denoise_loss(lambda x, c, t: np.zeros_like(x), x0, None, 5, eps, s)
    assert zero.item() == pytest.approx(np.mean(eps ** 2))


def test_denoise_loss_is_differentiable(rng):
    s = dif.build_schedule(10)
    w = T.Tensor(rng.standard_normal(1), requires_grad=True)
    x0 = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    loss = dif.denoise_loss(lambda x, c, t: T.Tensor(x) * w, x0, None, 3, eps, s)
    T.backward(loss)
    assert w.grad is not None and w.grad.shape == (1,)


def test_clip_eps(rng):
    s = dif.build_schedule(100)
    x0 = rng.uniform(-0.9, 0.9, 6)
    eps = rng.standard_normal(6)
    xt = dif.q_sample(x0, 30, eps, s)
    assert np.allclose(dif.clip_eps(xt, 30, eps, s), eps, atol=1e-12)
    wild = eps + 5.0
    implied = dif.predict_x0(xt, 30, dif.clip_eps(xt, 30, wild, s), s)
    assert np.allclose(implied, np.clip(dif.predict_x0(xt, 30, wild, s), -1, 1), atol=1e-12)
