"""Self-attention and text cross-attention.

Cross-attention exposes its softmax map ``M`` (``n_x x n_y``), which feeds
the space-MoE region masks and the edge head.  With several heads, each head
uses ``d / heads`` columns, head outputs are concatenated and the exported map
is the mean of the per-head maps.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Module, uniform_init


@dataclass
class AttentionMap:
    M: T.Tensor
    pad_mask: np.ndarray

    @property
    def shape(self):
        return self.M.shape


def _attend(q, k, v, heads, col_mask=None):
    d = q.shape[1]
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    outs, maps = [], []
    for i in range(heads):
        if heads == 1:
            qh, kh, vh = q, k, v
        else:
            cols = slice(i * dh, (i + 1) * dh)
            qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        m = T.softmax_rows(T.matmul(qh, kh.T) * scale, col_mask)
        maps.append(m)
        outs.append(T.matmul(m, vh))
    if heads == 1:
        return outs[0], maps[0]
    mean_map = maps[0]
    for m in maps[1:]:
        mean_map = mean_map + m
    return T.concat(outs, axis=1), mean_map * (1.0 / heads)


def cross_attention(h, text, w_qry, w_key, w_val, pad_mask=None, heads=1):
    """Returns ``(softmax(Q K^T / sqrt(d_head)) V, AttentionMap)`` with PAD columns masked."""
    if h.shape[1] != w_qry.shape[0] or text.shape[1] != w_key.shape[0] or text.shape[1] != w_val.shape[0]:
        raise DimensionError(
            f"cross attention dims: h {h.shape}, text {text.shape}, "
            f"W_qry {w_qry.shape}, W_key {w_key.shape}, W_val {w_val.shape}"
        )
    if pad_mask is None:
        pad_mask = np.zeros(text.shape[0], dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    q = T.matmul(h, w_qry)
    k = T.matmul(text, w_key)
    v = T.matmul(text, w_val)
    out, M = _attend(q, k, v, heads, pad_mask)
    return out, AttentionMap(M, pad_mask)


def self_attention(h, w_q, w_k, w_v, heads=1):
    if h.shape[1] != w_q.shape[0]:
        raise DimensionError(f"self attention dims: h {h.shape}, W_q {w_q.shape}")
    out, _ = _attend(T.matmul(h, w_q), T.matmul(h, w_k), T.matmul(h, w_v), heads)
    return out


class CrossAttention(Module):
    def __init__(self, d, d_y, rng, heads=1):
        self.heads = heads
        self.w_qry = uniform_init(rng, (d, d), d)
        self.w_key = uniform_init(rng, (d_y, d), d_y)
        self.w_val = uniform_init(rng, (d_y, d), d_y)

    def __call__(self, h, text, pad_mask=None):
        return cross_attention(h, text, self.w_qry, self.w_key, self.w_val, pad_mask, self.heads)


class SelfAttention(Module):
    def __init__(self, d, rng, heads=1):
        self.heads = heads
        self.w_q = uniform_init(rng, (d, d), d)
        self.w_k = uniform_init(rng, (d, d), d)
        self.w_v = uniform_init(rng, (d, d), d)

    def __call__(self, h):
        return self_attention(h, self.w_q, self.w_k, self.w_v, self.heads)
