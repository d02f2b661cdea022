"""Synthetic compositional scenes, aspect-ratio buckets and batch allocation."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .edge import edge_oracle
from .errors import AllocationError, GenerationError
from .text import COLORS, DEFAULT_VOCAB, NOUNS

# [height, width] pairs, in this order
FULL_BUCKETS = (
    (448, 832),
    (512, 768),
    (512, 704),
    (640, 640),
    (576, 640),
    (640, 576),
    (704, 512),
    (768, 512),
    (832, 448),
)
DESK_DIVISOR = 16


def desk_buckets(divisor=DESK_DIVISOR):
    return tuple((h // divisor, w // divisor) for h, w in FULL_BUCKETS)


def bucket_assign(h, w, buckets=FULL_BUCKETS):
    """Index of the bucket whose log aspect ratio is closest to ``log(w / h)``.

    Ties go to the smallest index.
    """
    if h <= 0 or w <= 0:
        raise ValueError(f"image dims must be positive, got {h}x{w}")
    target = math.log(w / h)
    best, best_d = 0, math.inf
    for i, (bh, bw) in enumerate(buckets):
        d = abs(target - math.log(bw / bh))
        if d < best_d:
            best, best_d = i, d
    return best


def resize_to_bucket(image, size):
    """Bilinear resize of a ``c x h x w`` image to ``size = (h', w')`` (no cropping)."""
    c, h, w = image.shape
    out = ndimage.zoom(image, (1, size[0] / h, size[1] / w), order=1, mode="nearest", grid_mode=True)
    assert out.shape[1:] == tuple(size), out.shape
    return np.clip(out, 0.0, 1.0)


def allocate_batches(counts, budget):
    """Split ``budget`` across buckets by largest remainder, at least 1 per non-empty bucket."""
    counts = [int(c) for c in counts]
    total = sum(counts)
    nonempty = [i for i, c in enumerate(counts) if c > 0]
    if total == 0:
        raise AllocationError("all buckets are empty")
    if budget < len(nonempty):
        raise AllocationError(f"budget {budget} smaller than {len(nonempty)} non-empty buckets")
    alloc = [c * budget // total for c in counts]
    rem = [c * budget % total for c in counts]
    left = budget - sum(alloc)
    for i in sorted(range(len(counts)), key=lambda i: (-rem[i], i))[:left]:
        alloc[i] += 1
    for i in nonempty:
        if alloc[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (alloc[j], -j))
            alloc[donor] -= 1
            alloc[i] = 1
    return alloc


@dataclass
class SceneConfig:
    """``shapes`` fixes the (color, noun) list; otherwise ``n_shapes`` (or 1-3 at random)."""

    shapes: list = None
    n_shapes: int = None
    bucket: int = None
    divisor: int = DESK_DIVISOR
    radius_frac: float = 0.2
    n_y: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    edge_fraction: float = 0.25
    buckets: tuple = field(default=None)

    def bucket_dims(self):
        return self.buckets if self.buckets is not None else desk_buckets(self.divisor)


@dataclass
class Scene:
    image: np.ndarray
    caption: list
    edge_map: np.ndarray
    bucket: int
    shapes: list
    seed: int = None


def _shape_mask(noun, h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if noun == "circle":
        return dy * dy + dx * dx <= r * r
    if noun == "square":
        s = 0.8 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if noun == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if noun == "triangle":
        top, bottom = -r, 0.8 * r
        frac = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= frac * r)
    raise GenerationError(f"unknown shape {noun!r}")


def _relation(a, b):
    dy, dx = b[0] - a[0], b[1] - a[1]
    if abs(dy) >= abs(dx):
        return "above" if dy > 0 else "below"
    return "left" if dx > 0 else "right"


def gen_scene(seed, config=None, vocab=DEFAULT_VOCAB):
    """Render 0-3 non-overlapping colored shapes; deterministic in ``seed``."""
    config = config or SceneConfig()
    rng = rngmod.make_rng(seed, rngmod.DATA)
    buckets = config.bucket_dims()
    if config.bucket is None:
        src_h, src_w = rng.integers(256, 1025, size=2)
        bucket = bucket_assign(int(src_h), int(src_w), buckets)
    else:
        bucket = config.bucket
    H, W = buckets[bucket]

    if config.shapes is not None:
        shapes = [tuple(s) for s in config.shapes]
    else:
        n = config.n_shapes if config.n_shapes is not None else int(rng.integers(1, 4))
        if n > len(COLORS):
            raise GenerationError(f"{n} shapes requested but only {len(COLORS)} colors exist")
        colors = rng.choice(list(COLORS), size=n, replace=False)
        nouns = rng.choice(list(NOUNS), size=n)
        shapes = [(str(c), str(s)) for c, s in zip(colors, nouns)]

    r = max(2.0, round(config.radius_frac * min(H, W)))
    cell = int(2 * r + 4)
    rows, cols = H // cell, W // cell
    if len(shapes) > rows * cols:
        raise GenerationError(f"{len(shapes)} shapes do not fit a {H}x{W} image ({rows * cols} slots)")

    image = np.empty((3, H, W))
    image[:] = np.asarray(config.background)[:, None, None]
    slots = rng.permutation(rows * cols)[: len(shapes)]
    centers = []
    off_y = (H - rows * cell) / 2.0
    off_x = (W - cols * cell) / 2.0
    for (color, noun), slot in zip(shapes, slots):
        i, j = divmod(int(slot), cols)
        jy, jx = rng.uniform(-0.5, 0.5, size=2)
        cy = off_y + (i + 0.5) * cell - 0.5 + jy
        cx = off_x + (j + 0.5) * cell - 0.5 + jx
        mask = _shape_mask(noun, H, W, cy, cx, r)
        image[:, mask] = np.asarray(COLORS[color])[:, None]
        centers.append((cy, cx))

    words = []
    for k, (color, noun) in enumerate(shapes):
        if k == 1:
            words.append(_relation(centers[0], centers[1]))
        elif k > 1:
            words.append("and")
        words += [color, noun]
    try:
        caption = vocab.encode(words, config.n_y)
    except ValueError as exc:
        raise GenerationError(str(exc)) from None

    return Scene(
        image=image,
        caption=caption,
        edge_map=edge_oracle(image, config.edge_fraction),
        bucket=bucket,
        shapes=[dict(color=c, noun=s, center=ctr) for (c, s), ctr in zip(shapes, centers)],
        seed=seed,
    )


def gen_dataset(count, seed, config=None):
    """Manifest records (scene seed, caption ids, bucket index) for ``count`` scenes."""
    config = config or SceneConfig()
    seeds = rngmod.make_rng(seed, rngmod.DATA, "dataset").integers(0, 2**62, size=count)
    records = []
    for s in seeds:
        scene = gen_scene(int(s), config)
        records.append({"seed": int(s), "caption": list(scene.caption), "bucket": int(scene.bucket)})
    return records


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def group_by_bucket(records):
    groups = {}
    for rec in records:
        groups.setdefault(rec["bucket"], []).append(rec)
    return groups
