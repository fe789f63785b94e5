"""
Wave masking
============

The image is cut into 16x16 patches (an 8x8 grid). Seed patches are drawn
from a truncated normal over the patch positions, enumerated column by
column, and every column that receives a seed is masked top to bottom.
At the default ratio of 0.3 two of the eight columns are hidden, mostly
the central ones where the QRS complex sits.
"""

import numpy as np

from ebgame.beats import rasterize_beat, synth_beat
from ebgame.model import ModelConfig, partition_patches, patchify, sample_wave_mask

grid = ModelConfig().grid
rng = np.random.default_rng(0)

mask = sample_wave_mask(grid, 0.3, rng)
print("seed patches", mask.seed_patches)
print("masked columns", mask.columns, "->", len(mask.masked), "patches")

img = rasterize_beat(synth_beat("normal", rng))
visible, masked = partition_patches(patchify(img, grid), mask)
print("visible", visible.shape, "masked", masked.shape)

# %%
# Which columns get masked, over many draws.

hist = np.zeros(grid.cols, int)
for _ in range(10_000):
    hist[list(sample_wave_mask(grid, 0.3, rng).columns)] += 1
for c, n in enumerate(hist):
    print(f"column {c}  {'#' * (n // 100)} {n}")
