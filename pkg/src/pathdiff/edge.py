"""Edge supervision on the pooled-token attention map.

The edge target comes from a deterministic Sobel oracle: grayscale is the
channel mean, the gradient magnitude uses 3x3 Sobel kernels with replicated
borders, and a pixel is an edge when its magnitude is positive and exceeds
``EDGE_FRACTION`` times the image maximum.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Module, uniform_init

EDGE_FRACTION = 0.25

def _sobel(gray):
    """Sobel x and y responses written as differences, so flat regions give exact zeros."""
    p = np.pad(gray, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def edge_oracle(image, fraction=EDGE_FRACTION):
    """Binary ``1 x h x w`` edge map of a ``c x h x w`` image in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    gray = image.mean(axis=0)
    mag = np.hypot(*_sobel(gray))
    peak = mag.max()
    edges = (mag > 0) & (mag > fraction * peak)
    return edges.astype(np.float64)[None]


def pooled_attention_image(attn_map, h_f, w_f):
    """Column 0 (the SUMMARY token) of the attention map as a 1 x h_f x w_f image."""
    M = attn_map.M if hasattr(attn_map, "M") else attn_map
    n_x = M.shape[0]
    if n_x != h_f * w_f:
        raise DimensionError(f"attention map has {n_x} rows, grid {h_f}x{w_f} needs {h_f * w_f}")
    return T.reshape(T.getitem(M, (slice(None), 0)), (1, h_f, w_f))


def max_pool_to(edge_map, h_f, w_f):
    """Downsample a binary ``1 x H x W`` map to ``1 x h_f x w_f`` by block max."""
    e = np.asarray(edge_map)[0]
    H, W = e.shape
    rows = (np.arange(h_f + 1) * H) // h_f
    cols = (np.arange(w_f + 1) * W) // w_f
    out = np.zeros((h_f, w_f))
    for i in range(h_f):
        for j in range(w_f):
            out[i, j] = e[rows[i]:rows[i + 1], cols[j]:cols[j + 1]].max()
    return out[None]


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.5
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0 or self.gamma < 0:
            raise ContractError(f"invalid focal parameters alpha={self.alpha}, gamma={self.gamma}")


def focal_loss(logits, target, params=FocalParams()):
    """Mean binary focal loss; log arguments are floored at 1e-12."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise DimensionError(f"focal loss shapes differ: {logits.shape} vs {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ContractError("focal loss target must be binary")
    q = T.sigmoid(logits)
    one_minus_q = 1.0 - q
    g = params.gamma
    pos = (one_minus_q ** g) * T.log(T.clip_min(q, 1e-12)) * (-params.alpha)
    neg = (q ** g) * T.log(T.clip_min(one_minus_q, 1e-12)) * (-(1.0 - params.alpha))
    per_pixel = pos * target + neg * (1.0 - target)
    return T.mean(per_pixel)


class EdgeHead(Module):
    """``layers`` 3x3 convolutions (GELU between) from 1 channel to 1 channel of logits."""

    def __init__(self, rng, layers=5, channels=8, kernel=3):
        if kernel % 2 == 0:
            raise ContractError("edge head kernel size must be odd")
        self.padding = (kernel - 1) // 2
        widths = [1] + [channels] * (layers - 1) + [1]
        self.kernels = []
        self.biases = []
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            self.kernels.append(uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
            self.biases.append(T.Tensor(np.zeros((c_out, 1, 1)), requires_grad=True))

    def __call__(self, x):
        n = len(self.kernels)
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            x = T.conv2d(x, k, self.padding) + b
            if i < n - 1:
                x = T.gelu(x)
        return x


def edge_loss(attn_map, edge_map, t, t_c, head, grid, params=FocalParams()):
    """Focal loss of the head's prediction; exactly zero (off the tape) when t > t_c."""
    if t > t_c:
        return T.Tensor(0.0)
    h_f, w_f = grid
    pred = head(pooled_attention_image(attn_map, h_f, w_f))
    return focal_loss(pred, max_pool_to(edge_map, h_f, w_f), params)
