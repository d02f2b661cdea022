"""Text-gated space mixture of experts.

Every non-PAD text token picks one expert through the text gate and that
expert processes the image tokens inside the token's region mask.  Outputs
are averaged over the non-PAD tokens.

Experts are bias-free position-wise networks, so ``e(0) == 0`` and masking
commutes with the expert: ``e(h * m) == e(h) * m`` for a row mask ``m``.  The
default ``"grouped"`` dispatch uses this to run each routed expert once over
all image tokens, so cost grows with the number of distinct experts in use
rather than with the token count.  ``"per_token"`` evaluates the literal sum
and works for any expert.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .nn import FeedForward, Module


def _softmax_vec(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class SpaceGate(Module):
    """Feed-forward map from a text token to ``k`` expert logits."""

    def __init__(self, d_y, k, rng, hidden=32, noise_scale=1.0):
        self.net = FeedForward(d_y, hidden, k, rng)
        self.k = k
        self.noise_scale = noise_scale
        self.train_mode = False

    def logits(self, tokens):
        return self.net(tokens)


def gate_choice(logits, noise):
    """argmax(softmax(logits + noise)) along the last axis."""
    return np.argmax(_softmax_vec(np.asarray(logits) + noise), axis=-1)


def text_route(token_repr, gate, rng=None):
    """Expert index for one token representation (length ``d_y``)."""
    x = token_repr.data if isinstance(token_repr, T.Tensor) else np.asarray(token_repr)
    with T.no_grad():
        z = gate.logits(T.Tensor(x.reshape(1, -1))).data[0]
    noise = 0.0
    if gate.train_mode and gate.noise_scale:
        noise = gate.noise_scale * rng.standard_normal(z.shape)
    return int(gate_choice(z, noise))


def route_tokens(text, pad_mask, gate, rng=None):
    """Expert per text token; PAD tokens get -1."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    with T.no_grad():
        z = gate.logits(T.Tensor(text.data)).data
    if gate.train_mode and gate.noise_scale:
        z = z + gate.noise_scale * rng.standard_normal(z.shape)
    routes = gate_choice(z, 0.0)
    routes[pad_mask] = -1
    return routes


@dataclass
class TokenMasks:
    masks: np.ndarray  # bool, n_x x n_y; PAD columns all False
    thresholds: np.ndarray  # n_y; NaN for PAD columns


def build_masks(attn_map, alpha):
    """``mask[j, i] = M[j, i] >= alpha * max_j M[j, i]`` for every non-PAD column i."""
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    M = attn_map.M.data if isinstance(attn_map.M, T.Tensor) else np.asarray(attn_map.M)
    pad = np.asarray(attn_map.pad_mask, dtype=bool)
    eta = alpha * M.max(axis=0)
    masks = M >= eta[None, :]
    masks[:, pad] = False
    eta = np.where(pad, np.nan, eta)
    return TokenMasks(masks, eta)


def space_moe_forward(h_prime, text, attn_map, experts, gate, alpha, rng=None,
                      dispatch="grouped", routes=None, sink=None):
    """Mean over non-PAD tokens of ``expert[route(y_i)](h' * mask_i)``.

    ``routes`` may be passed in precomputed; otherwise the gate decides.
    ``sink``, when given, is called with the route array (-1 on PAD).
    """
    pad = np.asarray(attn_map.pad_mask, dtype=bool)
    n_x = h_prime.shape[0]
    if attn_map.M.shape != (n_x, text.shape[0]):
        raise DimensionError(f"map {attn_map.M.shape} does not match h' {h_prime.shape} and text {text.shape}")
    tokens = np.flatnonzero(~pad)
    if tokens.size == 0:
        raise ContractError("space-MoE needs at least one non-PAD token")
    masks = build_masks(attn_map, alpha).masks
    if routes is None:
        routes = route_tokens(text, pad, gate, rng)
    routes = np.asarray(routes)
    if sink is not None:
        sink(routes)
    scale = 1.0 / tokens.size
    out = None
    if dispatch == "grouped":
        for e in np.unique(routes[tokens]):
            weight = masks[:, tokens[routes[tokens] == e]].sum(axis=1).astype(np.float64)
            if not weight.any():
                continue
            y = experts[e](h_prime) * weight[:, None]
            out = y if out is None else out + y
    elif dispatch == "per_token":
        for i in tokens:
            y = experts[routes[i]](h_prime * masks[:, i].astype(np.float64)[:, None])
            out = y if out is None else out + y
    else:
        raise ConfigError(f"unknown dispatch {dispatch!r}")
    if out is None:
        return T.zeros(h_prime.shape)
    return out * scale


def load_balance_loss(gate, text, pad_mask, routes):
    """Optional auxiliary loss ``k * sum_e f_e * P_e`` (fraction routed x mean gate prob).

    The only path by which gate parameters receive gradient.
    """
    tokens = np.flatnonzero(~np.asarray(pad_mask, dtype=bool))
    probs = T.softmax_rows(gate.logits(T.getitem(text, tokens)))
    mean_p = T.mean(probs, axis=0)
    frac = np.bincount(np.asarray(routes)[tokens], minlength=gate.k) / tokens.size
    return T.tsum(mean_p * frac) * float(gate.k)


class SpaceMoE(Module):
    def __init__(self, d, d_y, k, rng, expert_hidden=64, gate_hidden=32, alpha=0.2,
                 noise_scale=1.0, dispatch="grouped"):
        self.gate = SpaceGate(d_y, k, rng, gate_hidden, noise_scale)
        self.experts = [FeedForward(d, expert_hidden, d, rng, bias=False) for _ in range(k)]
        self.alpha = alpha
        self.dispatch = dispatch

    def __call__(self, h_prime, text, attn_map, rng=None, routes=None):
        if routes is None:
            routes = route_tokens(text, attn_map.pad_mask, self.gate, rng)
        out = space_moe_forward(h_prime, text, attn_map, self.experts, self.gate, self.alpha,
                                dispatch=self.dispatch, routes=routes)
        return out, routes
