"""Self-check suites run by ``pathdiff verify``.

Each check returns ``(passed, detail)``; :func:`run_suite` times them and
prints one line per check.
"""

import time
from dataclasses import replace

import numpy as np

from . import diffusion as dif
from . import rng as rngmod
from . import tensor as T
from .attention import AttentionMap
from .data import FULL_BUCKETS, allocate_batches, bucket_assign
from .edge import FocalParams, edge_oracle, focal_loss
from .model import ModelConfig, assemble_model
from .nn import FeedForward
from .space_moe import SpaceGate, build_masks, space_moe_forward
from .train import compute_losses, make_schedule

SUITES = ("grad", "oracle", "stats", "all")


def gaussian_eps_oracle(x_t, abar, mu, s2):
    """Posterior-mean noise for data ``N(mu, s2)``: ``E[eps | x_t]``."""
    return np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * mu) / (abar * s2 + 1.0 - abar)


def tiny_config(**kw):
    """One-block model of a few thousand parameters on 8x8 images."""
    base = ModelConfig(blocks=1, d=8, d_y=8, n_y=6, space_experts=3, time_experts=2, patch=2,
                       expert_hidden=8, gate_hidden=8, d_t=8, edge_layers=5, edge_channels=3,
                       max_grid=4)
    return replace(base, **kw)


def model_grad_error(seed=0, t=200, max_entries=None):
    """Max relative FD error over the combined loss of a tiny model at ``t <= T_c``."""
    cfg = tiny_config()
    model = assemble_model(cfg, seed).eval()
    rng = rngmod.make_rng(seed, rngmod.DATA, "grad")
    img = rng.uniform(0, 1, size=(3, 8, 8))
    img[:, 2:6, 2:6] = 1.0
    edge = edge_oracle(img)
    caption = [0, 6, 1, 15, 9, 18]
    eps = rng.standard_normal(img.shape)
    sched = make_schedule(cfg)
    params = model.parameters()

    def f():
        return compute_losses(model, img, edge, caption, t, eps, sched)[0]

    return T.grad_check_params(f, params, 1e-5, max_entries, rng), model.num_parameters()


# ---------------------------------------------------------------- grad suite


def check_op_grads():
    rng = np.random.default_rng(1)
    a = T.Tensor(rng.standard_normal((3, 4)))
    b = T.Tensor(rng.standard_normal((4, 2)))
    img = T.Tensor(rng.standard_normal((2, 5, 5)))
    k = T.Tensor(rng.standard_normal((3, 2, 3, 3)))
    cases = {
        "matmul": (lambda: T.tsum(T.square(a @ b)), [a, b]),
        "gelu": (lambda: T.tsum(T.gelu(a) * a), [a]),
        "softmax": (lambda: T.tsum(T.softmax_rows(a, np.array([False, True, False, False])) * a), [a]),
        "layer_norm": (lambda: T.tsum(T.layer_norm(a) * a), [a]),
        "conv2d": (lambda: T.tsum(T.square(T.conv2d(img, k, 1))), [img, k]),
    }
    worst = {n: T.grad_check_params(f, ps) for n, (f, ps) in cases.items()}
    bad = {n: e for n, e in worst.items() if e >= 1e-6}
    return not bad, " ".join(f"{n}={e:.1e}" for n, e in worst.items())


def check_focal_grad():
    rng = np.random.default_rng(2)
    z = T.Tensor(rng.standard_normal((1, 4, 4)))
    y = (rng.random((1, 4, 4)) < 0.3).astype(float)
    err = T.grad_check_params(lambda: focal_loss(z, y), [z])
    return err < 1e-6, f"max rel err {err:.2e}"


def check_model_grad():
    err, n = model_grad_error()
    return err < 1e-4, f"{n} params, max rel err {err:.2e}"


# ---------------------------------------------------------------- oracle suite


def _masks_loop(M, pad, alpha):
    n_x, n_y = M.shape
    out = np.zeros((n_x, n_y), dtype=bool)
    for i in range(n_y):
        if pad[i]:
            continue
        top = max(M[j, i] for j in range(n_x))
        for j in range(n_x):
            out[j, i] = M[j, i] >= alpha * top
    return out


def _random_map(rng, n_x, n_y):
    pad = np.zeros(n_y, dtype=bool)
    pad[int(rng.integers(1, n_y)):] = True
    z = rng.standard_normal((n_x, n_y))
    z[:, pad] = -np.inf
    M = np.exp(z - z.max(axis=1, keepdims=True))
    return M / M.sum(axis=1, keepdims=True), pad


def check_masks(n=200):
    rng = np.random.default_rng(3)
    for _ in range(n):
        M, pad = _random_map(rng, int(rng.integers(1, 20)), int(rng.integers(2, 8)))
        for alpha in (0.1, 0.2, 0.5, 1.0):
            got = build_masks(AttentionMap(M, pad), alpha).masks
            if not np.array_equal(got, _masks_loop(M, pad, alpha)):
                return False, f"mismatch at alpha={alpha}"
    return True, f"{n} maps x 4 alphas"


def space_moe_loop(h, text, M, pad, experts, gate, alpha):
    """Token x position double loop over the space-MoE definition."""
    n_x, d = h.shape
    z = gate.logits(T.Tensor(text)).data
    tokens = [i for i in range(len(pad)) if not pad[i]]
    out = np.zeros((n_x, experts[0].fc2.weight.shape[1]))
    for i in tokens:
        e = int(np.argmax(z[i]))
        top = M[:, i].max()
        masked = np.zeros_like(h)
        for j in range(n_x):
            if M[j, i] >= alpha * top:
                masked[j] = h[j]
        out += experts[e](T.Tensor(masked)).data
    return out / len(tokens)


def check_space_moe(n=30):
    worst = 0.0
    for s in range(n):
        rng = np.random.default_rng(100 + s)
        n_x, n_y, d, d_y, k = int(rng.integers(2, 12)), int(rng.integers(2, 6)), 4, 3, 3
        experts = [FeedForward(d, 5, d, rng, bias=False) for _ in range(k)]
        gate = SpaceGate(d_y, k, rng, hidden=4)
        h = rng.standard_normal((n_x, d))
        text = rng.standard_normal((n_y, d_y))
        M, pad = _random_map(rng, n_x, n_y)
        alpha = float(rng.uniform(0.05, 1.0))
        with T.no_grad():
            ref = space_moe_loop(h, text, M, pad, experts, gate, alpha)
            for mode in ("grouped", "per_token"):
                got = space_moe_forward(T.Tensor(h), T.Tensor(text), AttentionMap(M, pad), experts,
                                        gate, alpha, dispatch=mode).data
                worst = max(worst, float(np.abs(got - ref).max()))
    return worst <= 1e-12, f"max abs diff {worst:.1e}"


def _focal_loop(z, y, a, g):
    total = 0.0
    for zi, yi in zip(z.ravel(), y.ravel()):
        q = 1.0 / (1.0 + np.exp(-zi))
        if yi == 1:
            total += -a * (1 - q) ** g * np.log(max(q, 1e-12))
        else:
            total += -(1 - a) * q ** g * np.log(max(1 - q, 1e-12))
    return total / z.size


def check_focal(n=50):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(n):
        z = rng.standard_normal((1, 5, 6)) * 3
        y = (rng.random(z.shape) < 0.3).astype(float)
        a, g = float(rng.uniform(0.1, 0.9)), float(rng.choice([0.0, 1.0, 2.0, 2.5]))
        got = focal_loss(T.Tensor(z), y, FocalParams(a, g)).item()
        worst = max(worst, abs(got - _focal_loop(z, y, a, g)))
    return worst <= 1e-12, f"max abs diff {worst:.1e}"


def check_buckets(n=300):
    rng = np.random.default_rng(5)
    for _ in range(n):
        h, w = int(rng.integers(1, 4000)), int(rng.integers(1, 4000))
        d = [abs(np.log(h / w) - np.log(bh / bw)) for bh, bw in FULL_BUCKETS]
        if bucket_assign(h, w) != int(np.argmin(d)):
            return False, f"mismatch at {(h, w)}"
    for _ in range(n):
        counts = rng.integers(0, 50, size=int(rng.integers(1, 9)))
        if counts.sum() == 0:
            continue
        budget = int(rng.integers(np.count_nonzero(counts), 100))
        if sum(allocate_batches(counts, budget)) != budget:
            return False, f"allocation does not sum for {counts.tolist()} / {budget}"
    return True, f"{n} assignments, {n} allocations"


# ---------------------------------------------------------------- stats suite


def check_forward_stats(draws=100_000):
    rng = np.random.default_rng(6)
    x0 = 0.7
    lines = []
    ok = True
    for ab in (0.9, 0.5, 0.1):
        s = dif.schedule_from_alpha_bar([ab])
        xt = dif.q_sample(np.full(draws, x0), 1, rng.standard_normal(draws), s)
        se = np.sqrt((1 - ab) / draws)
        mean_ok = abs(xt.mean() - np.sqrt(ab) * x0) < 3 * se
        var_ok = abs(xt.var() / (1 - ab) - 1) < 0.02
        ok &= bool(mean_ok and var_ok)
        lines.append(f"abar={ab}:{'ok' if mean_ok and var_ok else 'FAIL'}")
    return ok, " ".join(lines)


def gaussian_sampling(chains=10_000, mu=0.5, s2=0.25, sampler="ddpm", steps=50, seed=7):
    """Sample mean and variance from the exact-score sampler on ``N(mu, s2)`` data."""
    sched = dif.build_schedule(1000)
    rng = np.random.default_rng(seed)

    def eps_fn(x, t):
        return gaussian_eps_oracle(x, sched.abar(t), mu, s2)

    x_T = rng.standard_normal(chains)
    if sampler == "ddpm":
        x = dif.ddpm_sample(eps_fn, x_T, sched, rng)
    else:
        x = dif.ddim_sample(eps_fn, x_T, sched, steps)
    return float(x.mean()), float(x.var())


def check_gaussian_sampling():
    mu, s2 = 0.5, 0.25
    parts = []
    ok = True
    for sampler in ("ddpm", "ddim"):
        m, v = gaussian_sampling(mu=mu, s2=s2, sampler=sampler)
        good = abs(m / mu - 1) < 0.05 and abs(v / s2 - 1) < 0.10
        ok &= good
        parts.append(f"{sampler}: mean {m:.4f} var {v:.4f}")
    return ok, "; ".join(parts)


CHECKS = {
    "grad": [("op gradients", check_op_grads), ("focal gradient", check_focal_grad),
             ("one-block model gradient", check_model_grad)],
    "oracle": [("region masks", check_masks), ("space-MoE double loop", check_space_moe),
               ("focal loss loop", check_focal), ("buckets and allocation", check_buckets)],
    "stats": [("forward diffusion moments", check_forward_stats),
              ("gaussian-oracle sampling", check_gaussian_sampling)],
}


def run_suite(name, out=print):
    """Run one suite (or ``all``); returns True when every check passed."""
    names = list(CHECKS) if name == "all" else [name]
    all_ok = True
    for suite in names:
        for label, fn in CHECKS[suite]:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failed check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            dt = time.perf_counter() - t0
            all_ok &= bool(ok)
            out(f"{'PASS' if ok else 'FAIL'} [{suite}] {label} ({dt:.2f}s) {detail}")
    return all_ok
