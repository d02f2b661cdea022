"""Training loop, AdamW, sampling and checkpoints for the desk denoiser."""

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint as ckpt
from . import diffusion as dif
from . import rng as rngmod
from . import tensor as T
from .data import SceneConfig, allocate_batches, gen_scene, group_by_bucket
from .edge import FocalParams, edge_loss
from .errors import ConfigError, ContractError, FormatError
from .model import Denoiser, ModelConfig
from .space_moe import load_balance_loss
from .text import DEFAULT_VOCAB


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 4e-3
    warmup: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    caption_dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 100
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    grad_clip: float = 0.0  # reserved; must stay 0

    def problems(self):
        out = []
        if self.steps < 0:
            out.append(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            out.append(f"lr must be >= 0, got {self.lr}")
        if self.warmup < 0:
            out.append(f"warmup must be >= 0, got {self.warmup}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("AdamW betas must lie in [0, 1)")
        if not 0 <= self.caption_dropout <= 1:
            out.append(f"caption_dropout must lie in [0, 1], got {self.caption_dropout}")
        if self.grad_clip:
            out.append("gradient clipping is not implemented; grad_clip must be 0")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


def _coerce(value, typ):
    if typ in (bool, "bool"):
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    return float(value)


def parse_config_text(text):
    """``key = value`` lines (``#`` comments) into a ``{key: str}`` dict."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def build_configs(raw):
    """Split a flat ``{key: value}`` dict into (ModelConfig, TrainConfig), reporting every problem."""
    mfields = {f.name: f.type for f in fields(ModelConfig)}
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    mvals, tvals, problems = {}, {}, []
    for k, v in raw.items():
        if k in mfields:
            target, typ = mvals, mfields[k]
        elif k in tfields:
            target, typ = tvals, tfields[k]
        else:
            problems.append(f"unknown config key {k!r}")
            continue
        try:
            target[k] = _coerce(v, typ)
        except ValueError:
            problems.append(f"{k}: cannot parse {v!r} as {typ if isinstance(typ, str) else typ.__name__}")
    mcfg, tcfg = ModelConfig(**mvals), TrainConfig(**tvals)
    problems += mcfg.problems() + tcfg.problems()
    if problems:
        raise ConfigError(problems)
    return mcfg, tcfg


def format_config(mcfg, tcfg):
    lines = [f"{k} = {v}" for k, v in asdict(mcfg).items()]
    lines += [f"{k} = {v}" for k, v in asdict(tcfg).items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- optimizer


def warmup_lr(base_lr, step, warmup):
    """``base_lr * step / warmup`` during warmup, ``base_lr`` afterwards (step is 1-based)."""
    if warmup <= 0 or step > warmup:
        return base_lr
    return base_lr * step / warmup


class AdamW:
    """Decoupled weight decay Adam; with weight_decay = 0 this is plain Adam."""

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup=0):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def current_lr(self, step=None):
        return warmup_lr(self.lr, self.step_count if step is None else step, self.warmup)

    def step(self):
        self.step_count += 1
        lr = self.current_lr()
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update
        return lr

    def state_tensors(self):
        out = {"opt.step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors):
        self.step_count = int(tensors["opt.step"])
        for k in self.params:
            self.m[k] = tensors[f"opt.m.{k}"].copy()
            self.v[k] = tensors[f"opt.v.{k}"].copy()


def make_optimizer(model, tcfg):
    return AdamW(model.named_parameters(), tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.adam_eps,
                 tcfg.weight_decay, tcfg.warmup)


def make_schedule(mcfg):
    return dif.build_schedule(mcfg.T, mcfg.beta_start, mcfg.beta_end,
                              "posterior" if mcfg.sigma_posterior else "beta")


# ---------------------------------------------------------------- losses


def to_model_space(image):
    """Images in [0, 1] are trained in [-1, 1]."""
    return 2.0 * np.asarray(image) - 1.0


def from_model_space(x):
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def compute_losses(model, image, edge_map, caption, t, eps, sched, rng=None, focal=FocalParams()):
    """Returns ``(L, L_denoise, L_edge, L_aux)`` as Tensors for one scene."""
    cfg = model.cfg
    x0 = to_model_space(image)
    x_t = dif.q_sample(x0, t, eps, sched)
    res = model.forward(x_t, caption, t, rng)
    l_den = T.mean(T.square(res.eps - eps))
    l_edge = T.Tensor(0.0)
    for block, attn_map in zip(model.blocks, res.maps):
        if block.edge_head is None:
            continue
        l_edge = l_edge + edge_loss(attn_map, edge_map, t, cfg.T_c, block.edge_head, res.grid, focal)
    total = l_den + l_edge
    l_aux = T.Tensor(0.0)
    if cfg.aux_weight:
        text = model.text_encoder(caption)
        pad = model.text_encoder.pad_mask(caption)
        for block, routes in zip(model.blocks, res.space_routes):
            l_aux = l_aux + load_balance_loss(block.space_moe.gate, text, pad, routes)
        total = total + l_aux * cfg.aux_weight
    return total, l_den, l_edge, l_aux


def train_step(model, batch, sched, opt, rng, tcfg=None, vocab=DEFAULT_VOCAB):
    """One optimizer step on a same-bucket batch of Scenes; returns metrics."""
    tcfg = tcfg or TrainConfig()
    if not batch:
        raise ContractError("empty batch")
    buckets = {s.bucket for s in batch}
    shapes = {s.image.shape for s in batch}
    if len(buckets) > 1 or len(shapes) > 1:
        raise ContractError(f"mixed-bucket batch: buckets {sorted(buckets)}")
    focal = FocalParams(tcfg.focal_alpha, tcfg.focal_gamma)
    model.train(True)
    model.zero_grad()
    n = len(batch)
    total = None
    items = []
    sum_den = sum_edge = 0.0
    for scene in batch:
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(scene.image.shape)
        caption = scene.caption
        if rng.random() < tcfg.caption_dropout:
            caption = vocab.null_caption(len(caption))
        loss, l_den, l_edge, _ = compute_losses(model, scene.image, scene.edge_map, caption, t, eps, sched, rng, focal)
        total = loss if total is None else total + loss
        items.append((t, l_den.item(), l_edge.item()))
        sum_den += l_den.item()
        sum_edge += l_edge.item()
    total = total * (1.0 / n)
    T.backward(total)
    lr = opt.step()
    model.train(False)
    return {
        "L": total.item(),
        "L_denoise": sum_den / n,
        "L_edge": sum_edge / n,
        "lr": lr,
        "items": items,
    }


# ---------------------------------------------------------------- loop


def bucket_plan(records, steps, rng, cycle=16):
    """Bucket index for each step; buckets get step slots in proportion to their size."""
    groups = group_by_bucket(records)
    keys = sorted(groups)
    counts = [len(groups[k]) for k in keys]
    cycle = max(cycle, len(keys))
    plan = []
    while len(plan) < steps:
        alloc = allocate_batches(counts, cycle)
        slots = [k for k, a in zip(keys, alloc) for _ in range(a)]
        plan += [slots[i] for i in rng.permutation(len(slots))]
    return plan[:steps]


class SceneCache:
    def __init__(self, scene_config=None):
        self.config = scene_config or SceneConfig()
        self._cache = {}

    def get(self, record):
        key = record["seed"]
        if key not in self._cache:
            self._cache[key] = gen_scene(record["seed"], self.config)
        return self._cache[key]


def train(model, records, sched, opt, tcfg, scene_config=None, start_step=0, callback=None):
    """Run ``tcfg.steps`` steps starting after ``start_step``; returns metric dicts."""
    if not records:
        raise ContractError("no training records")
    plan_rng = rngmod.make_rng(tcfg.seed, rngmod.TRAIN, "plan")
    plan = bucket_plan(records, start_step + tcfg.steps, plan_rng)
    groups = group_by_bucket(records)
    cache = SceneCache(scene_config)
    history = []
    for step in range(start_step + 1, start_step + tcfg.steps + 1):
        rng = rngmod.make_rng(tcfg.seed, rngmod.TRAIN, step)
        pool = groups[plan[step - 1]]
        take = min(tcfg.batch_size, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        batch = [cache.get(pool[i]) for i in sorted(idx)]
        metrics = train_step(model, batch, sched, opt, rng, tcfg)
        metrics["step"] = step
        history.append(metrics)
        if callback is not None:
            callback(step, metrics)
    return history


class MetricsWriter:
    """Append-only CSV: step, L, L_denoise, L_edge, lr."""

    header = ["step", "L", "L_denoise", "L_edge", "lr"]

    def __init__(self, path):
        self.path = path
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._w.writerow(self.header)

    def write(self, m):
        self._w.writerow([m["step"]] + [repr(float(m[k])) for k in self.header[1:]])
        self._fh.flush()

    def close(self):
        self._fh.close()


# ---------------------------------------------------------------- sampling


@dataclass
class SamplerConfig:
    steps: int = 50
    sampler: str = "ddim"
    guidance: float = 1.0
    seed: int = 0
    spacing: str = "quadratic"
    clip_x0: bool = True

    def validate(self, T_steps):
        problems = []
        if self.spacing not in ("linear", "quadratic"):
            problems.append(f"spacing must be 'linear' or 'quadratic', got {self.spacing!r}")
        if self.sampler not in ("ddpm", "ddim"):
            problems.append(f"sampler must be 'ddpm' or 'ddim', got {self.sampler!r}")
        if self.sampler == "ddim" and not 1 <= self.steps <= T_steps:
            problems.append(f"steps must lie in [1, {T_steps}]")
        if problems:
            raise ConfigError(problems)
        return self


def sample(model, caption, scfg, shape, sched=None, recorder=None, vocab=DEFAULT_VOCAB):
    """Generate an image in [0, 1] of ``shape = (c, H, W)``.

    ``recorder(t, forward_result)`` sees every conditional forward pass.
    DDPM always runs all T steps; DDIM uses ``scfg.steps``.  With
    ``scfg.clip_x0`` every noise estimate is replaced by the one whose implied
    clean image is clipped to the data range [-1, 1].
    """
    sched = sched or make_schedule(model.cfg)
    scfg.validate(sched.T)
    rng = rngmod.make_rng(scfg.seed, rngmod.SAMPLE)
    null = vocab.null_caption(len(caption))
    model.eval()

    def eps_fn(x, t):
        with T.no_grad():
            res = model.forward(x, caption, t)
            if recorder is not None:
                recorder(t, res)
            eps = res.eps.data
            if scfg.guidance != 1:
                eps = dif.cfg_combine(eps, model.forward(x, null, t).eps.data, scfg.guidance)
        return dif.clip_eps(x, t, eps, sched) if scfg.clip_x0 else eps

    x_T = rng.standard_normal(shape)
    if scfg.sampler == "ddpm":
        x0 = dif.ddpm_sample(eps_fn, x_T, sched, rng)
    else:
        x0 = dif.ddim_sample(eps_fn, x_T, sched, scfg.steps, spacing=scfg.spacing)
    return from_model_space(x0)


# ---------------------------------------------------------------- checkpoints


def _config_tensors(cfg):
    return {f"config.{k}": np.array(float(v)) for k, v in asdict(cfg).items()}


def save_checkpoint(model, opt, path):
    tensors = _config_tensors(model.cfg)
    for name, p in model.named_parameters():
        tensors[f"param.{name}"] = p.data
    if opt is not None:
        tensors.update(opt.state_tensors())
        tensors["opt.hyper"] = np.array([opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay, opt.warmup])
    ckpt.write_tensors(path, tensors)


def load_checkpoint(path):
    """Returns ``(model, optimizer or None)``; raises FormatError on any inconsistency."""
    tensors = ckpt.read_tensors(path)
    cfg_vals = {}
    for f in fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing {key}")
        v = float(tensors[key])
        cfg_vals[f.name] = bool(v) if f.type in (bool, "bool") else int(v) if f.type in (int, "int") else v
    cfg = ModelConfig(**cfg_vals)
    model = Denoiser(cfg, rngmod.make_rng(0, rngmod.INIT))
    named = dict(model.named_parameters())
    for name, p in named.items():
        key = f"param.{name}"
        if key not in tensors:
            raise FormatError(f"checkpoint missing {key}")
        if tensors[key].shape != p.shape:
            raise FormatError(f"{key}: shape {tensors[key].shape} != expected {p.shape}")
    extra = [k for k in tensors if k.startswith("param.") and k[6:] not in named]
    if extra:
        raise FormatError(f"unexpected records {extra[:3]}")
    for name, p in named.items():
        p.data = tensors[f"param.{name}"].copy()
    opt = None
    if "opt.hyper" in tensors:
        lr, b1, b2, eps, wd, warm = tensors["opt.hyper"]
        opt = AdamW(model.named_parameters(), lr, (b1, b2), eps, wd, int(warm))
        try:
            opt.load_state_tensors(tensors)
        except KeyError as exc:
            raise FormatError(f"checkpoint missing optimizer record {exc}") from None
    return model, opt
