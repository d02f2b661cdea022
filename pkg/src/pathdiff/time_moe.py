"""Timestep-gated mixture of experts.

The time embedding is sinusoidal with interleaved pairs::

    emb[2i]   = sin(t * f_i)
    emb[2i+1] = cos(t * f_i)
    f_i = 10000 ** (-i / (d_t/2 - 1)),  i = 0 .. d_t/2 - 1

so frequencies run geometrically from 1 down to 1/10000.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError
from .nn import FeedForward, Module
from .space_moe import gate_choice


def sinusoidal_embedding(t, d_t):
    if d_t < 2 or d_t % 2:
        raise ContractError(f"time embedding width must be even and >= 2, got {d_t}")
    half = d_t // 2
    freqs = 10000.0 ** (-np.arange(half) / (half - 1)) if half > 1 else np.ones(1)
    emb = np.empty(d_t)
    emb[0::2] = np.sin(t * freqs)
    emb[1::2] = np.cos(t * freqs)
    return emb


def time_embed(t, d_t, T_steps):
    if not 1 <= t <= T_steps:
        raise ContractError(f"timestep {t} outside [1, {T_steps}]")
    return sinusoidal_embedding(t, d_t)


class TimeGate(Module):
    def __init__(self, d_t, n_t, T_steps, rng, hidden=32, noise_scale=1.0):
        self.net = FeedForward(d_t, hidden, n_t, rng)
        self.d_t = d_t
        self.n_t = n_t
        self.T = T_steps
        self.noise_scale = noise_scale
        self.train_mode = False

    def logits(self, t):
        emb = T.Tensor(time_embed(t, self.d_t, self.T)[None])
        return self.net(emb)


def time_route(t, gate, rng=None):
    with T.no_grad():
        z = gate.logits(t).data[0]
    noise = 0.0
    if gate.train_mode and gate.noise_scale:
        noise = gate.noise_scale * rng.standard_normal(z.shape)
    return int(gate_choice(z, noise))


def routing_table(gate):
    """Noise-free expert index for every t in 1..T (index 0 is t = 1)."""
    prev = gate.train_mode
    gate.train_mode = False
    try:
        with T.no_grad():
            emb = np.stack([time_embed(t, gate.d_t, gate.T) for t in range(1, gate.T + 1)])
            z = gate.net(T.Tensor(emb)).data
    finally:
        gate.train_mode = prev
    return np.argmax(z, axis=1)


def time_moe_forward(h_c, t, experts, gate, rng=None, sink=None):
    """Apply the single expert chosen for ``t`` to every image token."""
    idx = time_route(t, gate, rng)
    if sink is not None:
        sink(idx)
    return experts[idx](h_c), idx


class TimeMoE(Module):
    def __init__(self, d, d_t, n_t, T_steps, rng, expert_hidden=64, gate_hidden=32, noise_scale=1.0):
        self.gate = TimeGate(d_t, n_t, T_steps, rng, gate_hidden, noise_scale)
        self.experts = [FeedForward(d, expert_hidden, d, rng) for _ in range(n_t)]

    def __call__(self, h_c, t, rng=None):
        return time_moe_forward(h_c, t, self.experts, self.gate, rng)
