"""
Patch grids and random masking
==============================

Walks through the token pipeline: split an image into patches, check the
round trip is exact, then sample masks at the standard ratio grid and look
at how often each patch ends up hidden.
"""

import numpy as np

from vmae.backbone import ModelConfig
from vmae.tokenizer import patchify, sample_mask, unpatchify

# a full-size config: 224x224 images in 16x16 patches -> 14x14 grid
cfg = ModelConfig()
print(f"grid {cfg.grid} -> {cfg.n_patches} patches of {cfg.patch_dim} values each")

rng = np.random.default_rng(0)
image = rng.uniform(0.0, 1.0, size=(cfg.image_size, cfg.image_size, 3))
patches = patchify(image, cfg.patch_size)
restored = unpatchify(patches)
print("round trip exact:", bool(np.array_equal(image, restored)))

# the masked count is fixed per ratio, only the choice of indices varies
print("\nratio  masked  visible")
for ratio in (0.25, 0.5, 0.75, 0.85):
    plan = sample_mask(cfg.n_patches, ratio, seed=1)
    print(f"{ratio:5.2f}  {plan.n_masked:6d}  {plan.visible_idx.size:7d}")

# over many draws every patch should be hidden about 75% of the time
hits = np.zeros(cfg.n_patches)
trials = 2000
for seed in range(trials):
    hits[sample_mask(cfg.n_patches, 0.75, seed).masked_idx] += 1
freq = hits / trials
print(f"\nper-patch mask frequency at 0.75: "
      f"min {freq.min():.3f}, mean {freq.mean():.3f}, max {freq.max():.3f}")
