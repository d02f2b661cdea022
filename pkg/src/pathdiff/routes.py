"""Diffusion-path recording and route-classification experiments."""

import csv
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ContractError
from .text import COLORS, DEFAULT_VOCAB, NOUNS
from .train import SamplerConfig, sample


@dataclass
class RouteTrace:
    concept: int
    position: int
    blocks: int
    entries: list = field(default_factory=list)  # (t, block, space_expert, time_expert)

    def __len__(self):
        return len(self.entries)


def trace_routes(model, caption, concept, scfg=None, shape=(3, 40, 40), sched=None):
    """Sample once with gate noise off and log the concept token's route at every (t, block)."""
    scfg = scfg or SamplerConfig(steps=10)
    caption = list(caption)
    if concept not in caption or concept == DEFAULT_VOCAB.pad_id:
        raise ContractError(f"concept token {concept} does not appear in the prompt")
    pos = caption.index(concept)
    trace = RouteTrace(concept, pos, len(model.blocks))

    def record(t, res):
        for b, (routes, t_idx) in enumerate(zip(res.space_routes, res.time_routes)):
            trace.entries.append((int(t), b, int(routes[pos]), int(t_idx)))

    sample(model, caption, scfg, shape, sched, recorder=record)
    return trace


def reduce_trace(trace, mode="majority"):
    """One expert index per block: majority over timesteps (ties to the smallest index),
    or the entry at the first / final recorded step."""
    if not trace.entries:
        raise ContractError("empty trace")
    out = np.zeros(trace.blocks, dtype=np.int64)
    for b in range(trace.blocks):
        seq = [e for e in trace.entries if e[1] == b]
        if mode == "majority":
            counts = Counter(e[2] for e in seq)
            top = max(counts.values())
            out[b] = min(k for k, c in counts.items() if c == top)
        elif mode == "first":
            out[b] = seq[0][2]
        elif mode == "final":
            out[b] = seq[-1][2]
        else:
            raise ContractError(f"unknown reduction {mode!r}")
    return out


@dataclass
class RouteDataset:
    labels: np.ndarray
    features: np.ndarray  # rows x B, integer expert indices

    def folds(self, k, seed=0):
        """Stratified fold id per row; folds partition the rows."""
        rng = rngmod.make_rng(seed, rngmod.ROUTE, "folds")
        fold = np.empty(len(self.labels), dtype=np.int64)
        for c in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == c)
            idx = idx[rng.permutation(idx.size)]
            start = int(rng.integers(k))
            fold[idx] = (np.arange(idx.size) + start) % k
        return fold


def one_hot_routes(features, n_experts):
    features = np.asarray(features, dtype=np.int64)
    n, B = features.shape
    X = np.zeros((n, B * n_experts))
    X[np.arange(n)[:, None], np.arange(B) * n_experts + features] = 1.0
    return X


def fit_softmax_regression(X, y, n_classes, iters=400, lr=0.5, l2=1e-3):
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    W = np.zeros((Xb.shape[1], n_classes))
    Y = np.eye(n_classes)[y]
    for _ in range(iters):
        z = Xb @ W
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * (Xb.T @ (p - Y) / len(y) + l2 * W)
    return W


def predict_softmax_regression(W, X):
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    return np.argmax(Xb @ W, axis=1)


def cross_validate(data, folds=5, n_experts=None, seed=0, iters=400):
    """Held-out predictions for every row; returns (mean accuracy, predictions, fold ids)."""
    labels = np.asarray(data.labels)
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ContractError("route classification needs at least two classes")
    counts = np.bincount(y)
    if counts.min() < folds:
        raise ContractError(f"every class needs >= {folds} rows, smallest has {counts.min()}")
    n_experts = n_experts or int(np.max(data.features)) + 1
    X = one_hot_routes(data.features, n_experts)
    fold = data.folds(folds, seed)
    pred = np.empty_like(y)
    accs = []
    for f in range(folds):
        test = fold == f
        W = fit_softmax_regression(X[~test], y[~test], classes.size, iters)
        pred[test] = predict_softmax_regression(W, X[test])
        accs.append(float(np.mean(pred[test] == y[test])))
    return float(np.mean(accs)), classes[pred], fold


def train_route_classifier(data, folds=5, n_experts=None, seed=0):
    """Mean k-fold cross-validated accuracy of route-vector -> concept classification."""
    return cross_validate(data, folds, n_experts, seed)[0]


def shuffled_control(data, folds=5, n_experts=None, seed=0):
    rng = rngmod.make_rng(seed, rngmod.ROUTE, "shuffle")
    shuffled = RouteDataset(data.labels[rng.permutation(len(data.labels))], data.features)
    return train_route_classifier(shuffled, folds, n_experts, seed)


# ---------------------------------------------------------------- prompts


def concept_prompts(concept_word, count, seed=0, n_y=16, vocab=DEFAULT_VOCAB):
    """Template captions where ``concept_word`` (a color) describes the first or second shape."""
    rng = rngmod.make_rng(seed, rngmod.ROUTE, concept_word)
    others = [c for c in COLORS if c != concept_word]
    rels = ["above", "below", "left", "right"]
    out = []
    for _ in range(count):
        noun_a, noun_b = rng.choice(list(NOUNS), size=2)
        other = str(rng.choice(others))
        form = int(rng.integers(3))
        if form == 0:
            words = [concept_word, noun_a]
        elif form == 1:
            words = [concept_word, noun_a, str(rng.choice(rels)), other, noun_b]
        else:
            words = [other, noun_a, str(rng.choice(rels)), concept_word, noun_b]
        out.append(vocab.encode([str(w) for w in words], n_y))
    return out


def collect_route_dataset(model, concepts, per_concept, scfg=None, shape=(3, 40, 40), seed=0,
                          mode="majority", vocab=DEFAULT_VOCAB):
    """Trace ``per_concept`` prompts for each concept word; returns (RouteDataset, traces)."""
    scfg = scfg or SamplerConfig(steps=4)
    labels, feats, traces = [], [], []
    n_y = model.cfg.n_y
    for c in concepts:
        cid = vocab.id(c)
        for j, cap in enumerate(concept_prompts(c, per_concept, seed, n_y, vocab)):
            run_cfg = replace(scfg, seed=scfg.seed + j)
            tr = trace_routes(model, cap, cid, run_cfg, shape)
            traces.append((cap, tr))
            labels.append(cid)
            feats.append(reduce_trace(tr, mode))
    return RouteDataset(np.array(labels), np.array(feats)), traces


# ---------------------------------------------------------------- exports


def write_trace_csv(path, traces):
    """Columns: prompt_id, concept, t, block, space_expert, time_expert."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prompt_id", "concept", "t", "block", "space_expert", "time_expert"])
        for pid, (_, tr) in enumerate(traces):
            for t, b, e, te in tr.entries:
                w.writerow([pid, tr.concept, t, b, e, te])


def write_feature_csv(path, data):
    B = data.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"e_{i + 1}" for i in range(B)])
        for lab, row in zip(data.labels, data.features):
            w.writerow([int(lab)] + [int(v) for v in row])


def write_time_table_csv(path, model):
    """Columns: t, block, expert (noise-free time routing for every t)."""
    from .time_moe import routing_table

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "block", "expert"])
        for b, block in enumerate(model.blocks):
            for t, e in enumerate(routing_table(block.time_moe.gate), start=1):
                w.writerow([t, b, int(e)])


def route_report(data, predictions, vocab=DEFAULT_VOCAB):
    """Per-class accuracy and distinct-route counts as text."""
    lines = ["concept,accuracy,rows,distinct_routes"]
    for c in np.unique(data.labels):
        sel = data.labels == c
        acc = float(np.mean(predictions[sel] == c))
        distinct = len({tuple(r) for r in data.features[sel]})
        lines.append(f"{vocab.word(int(c))},{acc:.4f},{int(sel.sum())},{distinct}")
    shared = Counter(tuple(r) for r in data.features)
    lines.append(f"# total distinct routes: {len(shared)}")
    return "\n".join(lines) + "\n"
