"""
Toy scenes and aspect buckets
=============================

Generate a few captioned scenes, look at which bucket each one lands in,
and write the first image and its edge map to disk.
"""

import numpy as np

from pathdiff.data import FULL_BUCKETS, allocate_batches, bucket_assign, desk_buckets, gen_dataset, gen_scene
from pathdiff.edge import edge_oracle
from pathdiff.pnm import write_pgm, write_ppm
from pathdiff.text import DEFAULT_VOCAB

# nine full-size buckets, and the desk versions used for training
print(FULL_BUCKETS)
print(desk_buckets())

# a wide photo goes to the widest bucket
print(bucket_assign(h=450, w=900))

scene = gen_scene(7)
print(DEFAULT_VOCAB.decode(scene.caption))
print(scene.image.shape, "bucket", scene.bucket)

# the edge target is a thresholded Sobel magnitude
edges = edge_oracle(scene.image)
print("edge pixels:", int(edges.sum()), "of", edges.size)
write_ppm("scene.ppm", scene.image)
write_pgm("scene_edges.pgm", edges)

# how a budget of 32 batches splits over bucket sizes
records = gen_dataset(64, 0)
counts = np.bincount([r["bucket"] for r in records], minlength=9)
print(counts, allocate_batches(counts, 32))
