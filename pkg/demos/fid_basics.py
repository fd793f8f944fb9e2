"""
Frechet distance with mergeable statistics
===========================================

Feature statistics of image sets, shard merging, and the distance between
two sets, using the weight-free handcrafted extractor.
"""

import numpy as np

from croptryon.evaluation import HandcraftedExtractor, accumulate_fid_stats, frechet_distance
from croptryon.toy import make_toy_sample

ext = HandcraftedExtractor()
print(ext.id, "dim", ext.dim)

people = [make_toy_sample(f"{i:03d}", 64, 48, rng=i).person_image for i in range(60)]
noise = list(np.random.default_rng(0).random((30, 64, 48, 3)))

full = accumulate_fid_stats(people, ext)
# statistics of two shards merge to the single-pass result
merged = accumulate_fid_stats(people[:25], ext).merge(accumulate_fid_stats(people[25:], ext))
print("merge max abs diff:", float(np.abs(merged.cov - full.cov).max()))

half_a = accumulate_fid_stats(people[:30], ext)
half_b = accumulate_fid_stats(people[30:], ext)
print("self distance:", frechet_distance(full, full))
print("half vs half:", round(frechet_distance(half_a, half_b), 4))
print("toy vs noise:", round(frechet_distance(half_a, accumulate_fid_stats(noise, ext)), 4))
