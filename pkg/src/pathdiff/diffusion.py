"""Noise schedules, forward corruption, DDPM/DDIM reverse steps and guidance.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``.
Forward corruption uses ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def abar(self, t):
        """alpha_bar at 1-based ``t``; ``abar(0) == 1``."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def check_t(self, t):
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")


def _finish(beta, sigma):
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma == "beta":
        sig = np.sqrt(beta)
    elif sigma == "posterior":
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sig = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    else:
        raise ConfigError(f"unknown sigma choice {sigma!r} (use 'beta' or 'posterior')")
    return NoiseSchedule(len(beta), beta, alpha, alpha_bar, sig)


def build_schedule(T_steps, beta_start=1e-4, beta_end=0.02, sigma="beta"):
    """Linear beta schedule; ``sigma`` is ``"beta"`` (sqrt beta_t) or ``"posterior"``."""
    problems = []
    if T_steps < 2:
        problems.append(f"T must be at least 2, got {T_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        problems.append(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if problems:
        raise ConfigError(problems)
    return _finish(np.linspace(beta_start, beta_end, T_steps), sigma)


def schedule_from_alpha_bar(alpha_bar, sigma="beta"):
    """Schedule whose cumulative products are exactly ``alpha_bar`` (strictly decreasing)."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / prev
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("alpha_bar must be strictly decreasing inside (0, 1)")
    sched = _finish(beta, sigma)
    return NoiseSchedule(sched.T, sched.beta, sched.alpha, ab.copy(), sched.sigma)


def q_sample(x0, t, eps, s):
    """Closed-form forward sample; works on arrays or Tensors."""
    shape = lambda a: np.shape(a.data if isinstance(a, T.Tensor) else a)  # noqa: E731
    if shape(x0) != shape(eps):
        raise DimensionError("x0 and eps must have the same shape")
    s.check_t(t)
    ab = s.abar(t)
    return x0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def ddpm_step(x_t, t, eps_hat, z, s):
    """Ancestral step ``x_t -> x_{t-1}``; the injected noise is dropped at t = 1."""
    s.check_t(t)
    a = s.alpha[t - 1]
    coef = 0.0 if a == 1.0 else (1.0 - a) / np.sqrt(1.0 - s.alpha_bar[t - 1])
    mean = (x_t - coef * eps_hat) / np.sqrt(a)
    if t == 1:
        return mean
    return mean + s.sigma[t - 1] * z


def predict_x0(x_t, t, eps_hat, s):
    ab = s.abar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def clip_eps(x_t, t, eps_hat, s, lo=-1.0, hi=1.0):
    """Noise estimate consistent with the x0 prediction clipped to ``[lo, hi]``."""
    ab = s.abar(t)
    x0 = np.clip(predict_x0(x_t, t, eps_hat, s), lo, hi)
    return (x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)


def ddim_step(x_t, t, t_prev, eps_hat, s):
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev`` (0 means clean)."""
    s.check_t(t)
    if not 0 <= t_prev < t:
        raise ContractError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_prev = s.abar(t_prev)
    x0_hat = predict_x0(x_t, t, eps_hat, s)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def cfg_combine(eps_cond, eps_uncond, w):
    """``eps_uncond + w * (eps_cond - eps_uncond)``; w = 1 and w = 0 return an input exactly."""
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_timesteps(T_steps, steps, spacing="quadratic"):
    """``steps`` strictly decreasing timesteps from ``T_steps`` down to 1.

    ``"linear"`` spaces them evenly in t; ``"quadratic"`` evenly in sqrt(t),
    which puts more steps at low noise.
    """
    if not 1 <= steps <= T_steps:
        raise ContractError(f"DDIM steps must be in [1, {T_steps}], got {steps}")
    if spacing == "linear":
        raw = np.linspace(T_steps, 1, steps)
    elif spacing == "quadratic":
        raw = np.linspace(np.sqrt(T_steps), 1.0, steps) ** 2
    else:
        raise ConfigError(f"unknown DDIM spacing {spacing!r}")
    ts = [int(np.round(raw[0]))] if steps else []
    for i in range(1, steps):
        ts.append(max(min(int(np.round(raw[i])), ts[-1] - 1), steps - i))
    return ts


def ddpm_sample(eps_fn, x_T, s, rng, callback=None):
    """Run ``T`` ancestral steps from ``x_T``; ``eps_fn(x, t)`` returns the noise estimate."""
    x = x_T
    for t in range(s.T, 0, -1):
        eps_hat = eps_fn(x, t)
        z = rng.standard_normal(np.shape(x)) if t > 1 else np.zeros(np.shape(x))
        x = ddpm_step(x, t, eps_hat, z, s)
        if callback is not None:
            callback(t, x)
    return x


def ddim_sample(eps_fn, x_T, s, steps, callback=None, spacing="quadratic"):
    ts = ddim_timesteps(s.T, steps, spacing)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x = ddim_step(x, t, t_prev, eps_fn(x, t), s)
        if callback is not None:
            callback(t, x)
    return x


def denoise_loss(model, x0, caption, t, eps, s):
    """``mean((eps - model(x_t, caption, t))**2)`` with ``x_t = q_sample(x0, t, eps)``."""
    x_t = q_sample(np.asarray(x0), t, np.asarray(eps), s)
    pred = T.as_tensor(model(x_t, caption, t))
    diff = pred - eps
    return T.mean(T.square(diff))
