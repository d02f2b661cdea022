"""The denoiser: patch embedding, a stack of MoE transformer blocks, and a patch head.

Each block runs, with a residual connection around each layer and a layer
norm in front of it::

    self-attention -> cross-attention (exports M) -> time-MoE -> space-MoE

plus an edge head reading the SUMMARY column of M.  Image tokens carry a
learned row + column position embedding and a projected sinusoidal time
embedding.  With ``input_skip`` the output adds a linear map of the input
patches, initialized to the identity.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .attention import CrossAttention, SelfAttention
from .edge import EdgeHead
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module
from .space_moe import SpaceMoE
from .text import DEFAULT_VOCAB, TextEncoder
from .time_moe import TimeMoE, sinusoidal_embedding


@dataclass
class ModelConfig:
    blocks: int = 4
    d: int = 32
    d_y: int = 32
    n_y: int = 16
    space_experts: int = 6
    time_experts: int = 4
    T: int = 1000
    T_c: int = 500
    alpha: float = 0.2
    heads: int = 1
    stages: int = 1  # reserved for a hierarchical backbone; only 1 is built
    patch: int = 4
    channels: int = 3
    expert_hidden: int = 64
    gate_hidden: int = 32
    d_t: int = 32
    edge_layers: int = 5
    edge_channels: int = 8
    edge_all_blocks: bool = True
    gate_noise: float = 1.0
    aux_weight: float = 0.0
    max_grid: int = 16
    vocab_size: int = len(DEFAULT_VOCAB)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_posterior: bool = False
    input_skip: bool = True

    def problems(self):
        out = []
        for name in ("blocks", "d", "d_y", "n_y", "space_experts", "time_experts", "T", "T_c",
                     "heads", "stages", "patch", "channels", "expert_hidden", "gate_hidden",
                     "d_t", "edge_layers", "edge_channels", "max_grid", "vocab_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.heads >= 1 and self.d % self.heads:
            out.append(f"d={self.d} not divisible by heads={self.heads}")
        if self.d_t % 2:
            out.append(f"d_t must be even, got {self.d_t}")
        if not 0.0 < self.alpha <= 1.0:
            out.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.stages != 1:
            out.append("only stages=1 is implemented")
        if self.T_c > self.T:
            out.append(f"T_c={self.T_c} exceeds T={self.T}")
        if self.n_y < 2:
            out.append("n_y must leave room for SUMMARY plus one token")
        if self.gate_noise < 0 or self.aux_weight < 0:
            out.append("gate_noise and aux_weight must be non-negative")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in unknown])
        return cls(**d)


@dataclass
class ForwardResult:
    eps: T.Tensor
    maps: list
    space_routes: list
    time_routes: list
    grid: tuple


class Block(Module):
    def __init__(self, cfg, rng, with_edge_head=True):
        d = cfg.d
        self.ln_self = LayerNorm(d)
        self.self_attn = SelfAttention(d, rng, cfg.heads)
        self.ln_cross = LayerNorm(d)
        self.cross_attn = CrossAttention(d, cfg.d_y, rng, cfg.heads)
        self.ln_time = LayerNorm(d)
        self.time_moe = TimeMoE(d, cfg.d_t, cfg.time_experts, cfg.T, rng, cfg.expert_hidden,
                                cfg.gate_hidden, cfg.gate_noise)
        self.ln_space = LayerNorm(d)
        self.space_moe = SpaceMoE(d, cfg.d_y, cfg.space_experts, rng, cfg.expert_hidden,
                                  cfg.gate_hidden, cfg.alpha, cfg.gate_noise)
        self.edge_head = EdgeHead(rng, cfg.edge_layers, cfg.edge_channels) if with_edge_head else None

    def __call__(self, h, text, pad_mask, t, rng=None):
        h = h + self.self_attn(self.ln_self(h))
        c, attn_map = self.cross_attn(self.ln_cross(h), text, pad_mask)
        h = h + c
        y, t_idx = self.time_moe(self.ln_time(h), t, rng)
        h = h + y
        y, routes = self.space_moe(self.ln_space(h), text, attn_map, rng)
        h = h + y
        return h, attn_map, routes, t_idx


def patchify(x, p):
    c, H, W = x.shape
    gh, gw = H // p, W // p
    return x.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)


def unpatchify(tokens, c, H, W, p):
    gh, gw = H // p, W // p
    x = T.reshape(tokens, (gh, gw, c, p, p))
    x = T.permute(x, (2, 0, 3, 1, 4))
    return T.reshape(x, (c, H, W))


class Denoiser(Module):
    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        pd = cfg.channels * cfg.patch * cfg.patch
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.n_y, cfg.d_y, rng)
        self.patch_embed = Linear(pd, cfg.d, rng)
        self.row_pos = T.Tensor(rng.uniform(-0.5, 0.5, size=(cfg.max_grid, cfg.d)), requires_grad=True)
        self.col_pos = T.Tensor(rng.uniform(-0.5, 0.5, size=(cfg.max_grid, cfg.d)), requires_grad=True)
        self.time_proj = Linear(cfg.d_t, cfg.d, rng)
        self.blocks = [Block(cfg, rng, cfg.edge_all_blocks or i == cfg.blocks - 1) for i in range(cfg.blocks)]
        self.ln_out = LayerNorm(cfg.d)
        self.head = Linear(cfg.d, pd, rng)
        # identity start: x_t itself is the best noise guess at large t
        self.skip = T.Tensor(np.eye(pd), requires_grad=True) if cfg.input_skip else None

    def train(self, flag=True):
        for b in self.blocks:
            b.space_moe.gate.train_mode = flag
            b.time_moe.gate.train_mode = flag
        return self

    def eval(self):
        return self.train(False)

    def edge_heads(self):
        return [b.edge_head for b in self.blocks]

    def block_parameter_count(self):
        return sum(b.num_parameters() for b in self.blocks)

    def grid(self, H, W):
        p = self.cfg.patch
        if H % p or W % p:
            raise ConfigError(f"image {H}x{W} not divisible by patch {p}")
        gh, gw = H // p, W // p
        if gh > self.cfg.max_grid or gw > self.cfg.max_grid:
            raise ConfigError(f"grid {gh}x{gw} exceeds max_grid={self.cfg.max_grid}")
        return gh, gw

    def forward(self, x_t, caption, t, rng=None):
        cfg = self.cfg
        x_t = np.asarray(x_t.data if isinstance(x_t, T.Tensor) else x_t, dtype=np.float64)
        c, H, W = x_t.shape
        gh, gw = self.grid(H, W)
        text = self.text_encoder(caption)
        pad_mask = self.text_encoder.pad_mask(caption)
        rows = np.repeat(np.arange(gh), gw)
        cols = np.tile(np.arange(gw), gh)
        patches = T.Tensor(patchify(x_t, cfg.patch))
        h = self.patch_embed(patches)
        h = h + T.getitem(self.row_pos, rows) + T.getitem(self.col_pos, cols)
        h = h + self.time_proj(T.Tensor(sinusoidal_embedding(t, cfg.d_t)[None]))
        maps, space_routes, time_routes = [], [], []
        for block in self.blocks:
            h, attn_map, routes, t_idx = block(h, text, pad_mask, t, rng)
            maps.append(attn_map)
            space_routes.append(routes)
            time_routes.append(t_idx)
        out = self.head(self.ln_out(h))
        if self.skip is not None:
            out = out + T.matmul(patches, self.skip)
        eps = unpatchify(out, c, H, W, cfg.patch)
        return ForwardResult(eps, maps, space_routes, time_routes, (gh, gw))

    def __call__(self, x_t, caption, t, rng=None):
        return self.forward(x_t, caption, t, rng).eps


def assemble_model(cfg, seed=0):
    """Build a denoiser with deterministic fan-in initialization from ``seed``."""
    return Denoiser(cfg, rngmod.make_rng(seed, rngmod.INIT))
