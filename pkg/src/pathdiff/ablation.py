"""Hyper-parameter sweeps and the expert-count cost measurement."""

import time
from dataclasses import replace

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError
from .model import ModelConfig, assemble_model
from .text import COLORS, DEFAULT_VOCAB
from .train import (SamplerConfig, TrainConfig, compute_losses, make_optimizer, make_schedule,
                    sample, train)

KNOBS = ("alpha", "tc", "experts", "guidance")
DEFAULT_VALUES = {
    "alpha": (0.1, 0.2, 0.4),
    "tc": (250, 500, 750),
    "experts": (1, 2, 4),
    "guidance": (1.5, 3.0, 4.5, 6.0, 7.5, 9.0),
}
PALETTE = np.array(list(COLORS.values()))


def color_alignment(image, caption, vocab=DEFAULT_VOCAB):
    """Fraction of bright pixels whose nearest palette color is named in the caption."""
    words = set(vocab.decode(caption))
    wanted = [i for i, c in enumerate(COLORS) if c in words]
    px = np.asarray(image).reshape(image.shape[0], -1).T
    bright = px.max(axis=1) > 0.5
    if not wanted or not bright.any():
        return 0.0
    d = ((px[bright, None, :] - PALETTE[None]) ** 2).sum(axis=2)
    nearest = d.argmin(axis=1)
    return float(np.isin(nearest, wanted).mean())


def _alignment(model, captions, scfg, shape):
    scores = []
    for j, cap in enumerate(captions):
        img = sample(model, cap, replace(scfg, seed=scfg.seed + j), shape)
        scores.append(color_alignment(img, cap))
    return float(np.mean(scores))


def _eval_captions(n, n_y, seed):
    rng = rngmod.make_rng(seed, rngmod.SAMPLE, "ablation")
    colors = list(COLORS)
    return [DEFAULT_VOCAB.encode([colors[int(rng.integers(len(colors)))], "circle"], n_y) for _ in range(n)]


def apply_knob(mcfg, knob, value):
    if knob == "alpha":
        return replace(mcfg, alpha=float(value))
    if knob == "tc":
        return replace(mcfg, T_c=int(value))
    if knob == "experts":
        return replace(mcfg, space_experts=int(value))
    raise ConfigError(f"knob {knob!r} does not change the model")


def run_ablation(knob, values, records, mcfg, tcfg, scfg=None, n_eval=4, shape=(3, 40, 40),
                 baseline=None, scene_config=None):
    """Rows of (value, L_denoise_final, alignment, seconds_per_step).

    alpha / tc / experts retrain a model per value; guidance reuses ``baseline``
    (trained here when not given) and times sampling steps instead.
    """
    if knob not in KNOBS:
        raise ConfigError(f"unknown knob {knob!r}; choose from {', '.join(KNOBS)}")
    scfg = scfg or SamplerConfig(steps=10)
    n_y = baseline.cfg.n_y if baseline is not None else mcfg.n_y
    captions = _eval_captions(n_eval, n_y, tcfg.seed)
    rows = []
    if knob == "guidance":
        if baseline is None:
            baseline = assemble_model(mcfg, tcfg.seed)
            hist = train(baseline, records, make_schedule(mcfg), make_optimizer(baseline, tcfg), tcfg,
                         scene_config)
            l_final = _tail_mean(hist)
        else:
            l_final = float("nan")
        for w in values:
            run = replace(scfg, guidance=float(w))
            t0 = time.perf_counter()
            align = _alignment(baseline, captions, run, shape)
            per_step = (time.perf_counter() - t0) / (n_eval * scfg.steps)
            rows.append((float(w), l_final, align, per_step))
        return rows
    for v in values:
        cfg = apply_knob(mcfg, knob, v).validate()
        model = assemble_model(cfg, tcfg.seed)
        t0 = time.perf_counter()
        hist = train(model, records, make_schedule(cfg), make_optimizer(model, tcfg), tcfg, scene_config)
        per_step = (time.perf_counter() - t0) / max(1, tcfg.steps)
        rows.append((v, _tail_mean(hist), _alignment(model, captions, scfg, shape), per_step))
    return rows


def _tail_mean(hist, frac=0.2):
    if not hist:
        return float("nan")
    k = max(1, int(len(hist) * frac))
    return float(np.mean([h["L_denoise"] for h in hist[-k:]]))


# ---------------------------------------------------------------- cost curve


def restrict_experts(model, active):
    """Make every space gate choose only among its first ``active`` experts."""
    for block in model.blocks:
        bias = block.space_moe.gate.net.fc2.bias
        bias.data[active:] = -1e9


def cost_config(k, n_tokens=40):
    return ModelConfig(blocks=1, d=64, d_y=32, n_y=n_tokens + 1, space_experts=k, time_experts=1,
                       patch=4, expert_hidden=256, edge_layers=1, edge_channels=1, max_grid=16)


def expert_cost_curve(ks=(1, 2, 4, 6), active=None, n_tokens=40, image=64, rounds=9, seed=0):
    """Median seconds per training step for each expert count.

    ``active`` maps k to the number of experts the gate may use (default k).
    Returns ``{k: (median_seconds, distinct_experts_used)}``.
    """
    active = active or {}
    rng = rngmod.make_rng(seed, rngmod.SAMPLE, "cost")
    vocab_ids = [i for i in range(1, len(DEFAULT_VOCAB) - 1)]
    caption = [0] + [int(v) for v in rng.choice(vocab_ids, size=n_tokens)]
    img = rng.uniform(0, 1, size=(3, image, image))
    edge = np.zeros((1, image, image))
    eps = rng.standard_normal(img.shape)
    setups = {}
    for k in ks:
        cfg = cost_config(k, n_tokens)
        model = assemble_model(cfg, seed)
        restrict_experts(model, active.get(k, k))
        opt = make_optimizer(model, TrainConfig(lr=1e-4, warmup=0))
        setups[k] = (model, opt, make_schedule(cfg))
    times = {k: [] for k in ks}
    used = {k: set() for k in ks}
    for r in range(rounds + 1):
        for k in ks:
            model, opt, sched = setups[k]
            t0 = time.perf_counter()
            model.zero_grad()
            loss, _, _, _ = compute_losses(model, img, edge, caption, sched.T, eps, sched)
            T.backward(loss)
            opt.step()
            dt = time.perf_counter() - t0
            if r:  # first round is warm-up
                times[k].append(dt)
            with T.no_grad():
                res = model.forward(img, caption, sched.T)
            used[k].update(int(e) for e in res.space_routes[0] if e >= 0)
    return {k: (float(np.median(times[k])), len(used[k])) for k in ks}
