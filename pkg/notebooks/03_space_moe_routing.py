"""
Text-routed spatial experts
===========================

One layer on random inputs: every caption token picks an expert, its
attention column picks a region, and overlapping regions are averaged.
"""

import numpy as np

from pathdiff import tensor as T
from pathdiff.attention import CrossAttention
from pathdiff.space_moe import SpaceMoE, build_masks

rng = np.random.default_rng(0)
d, d_y, n_x = 16, 8, 25
text = T.Tensor(rng.standard_normal((4, d_y)))
pad = np.array([False, False, False, True])
h = T.Tensor(rng.standard_normal((n_x, d)))

attn = CrossAttention(d, d_y, rng)
_, amap = attn(h, text, pad)
masks = build_masks(amap, 0.2)
print("region sizes per token:", masks.masks.sum(axis=0))
# near-uniform attention at init keeps every pixel; a higher alpha is pickier
print("alpha 0.9:", build_masks(amap, 0.9).masks.sum(axis=0))

moe = SpaceMoE(d, d_y, 6, rng)
out, routes = moe(h, text, amap)
print("expert per live token:", routes)
print("rows touched:", int(np.any(out.data != 0, axis=1).sum()), "of", n_x)
