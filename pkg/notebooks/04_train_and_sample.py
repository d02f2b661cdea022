"""
Training the desk model
=======================

A short run on the toy scenes, then a guided sample for a simple caption.
500 steps takes a minute or two; fewer steps still runs end to end.
"""

import sys

import numpy as np

from pathdiff.data import gen_dataset
from pathdiff.model import ModelConfig, assemble_model
from pathdiff.pnm import write_ppm
from pathdiff.text import DEFAULT_VOCAB
from pathdiff.train import SamplerConfig, TrainConfig, make_optimizer, make_schedule, sample, save_checkpoint, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
mcfg = ModelConfig()
tcfg = TrainConfig(steps=steps)
model = assemble_model(mcfg, tcfg.seed)
sched = make_schedule(mcfg)
opt = make_optimizer(model, tcfg)
history = train(model, gen_dataset(256, 0), sched, opt, tcfg)

loss = np.array([m["L_denoise"] for m in history])
print("denoise loss, first 25 vs last 50:", loss[:25].mean(), loss[-50:].mean())
save_checkpoint(model, opt, "desk.pdc")

cap = DEFAULT_VOCAB.encode(["red", "circle"], mcfg.n_y)
for w in (1.0, 3.0):
    img = sample(model, cap, SamplerConfig(steps=50, guidance=w, seed=0), (3, 40, 40), sched)
    write_ppm(f"red_circle_w{w:g}.ppm", img)
