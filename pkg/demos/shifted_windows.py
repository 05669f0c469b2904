"""How the shifted-window mask carves a rolled map into regions.

After rolling an 8x8 map by half a window (2), the windows along the bottom and
right edge hold tokens from opposite sides of the image. The mask keeps those
groups from attending to each other.

    python demos/shifted_windows.py
"""

import numpy as np

from cetnet.attention import WindowBlock, WindowGrid, build_shift_mask, region_labels
from cetnet.tensor import Tensor

grid = WindowGrid.for_map(8, 8, 4, shifted=True)
print(f"grid {grid.H}x{grid.W}, window {grid.M}, shift {grid.shift}, {grid.windows} windows")
print("region label of each token in the rolled frame:")
print(region_labels(grid))

mask = build_shift_mask(grid)
for w in range(grid.windows):
    blocked = int((mask[w] != 0).sum())
    print(f"  window {w}: {blocked:3d} of {mask[w].size} pairs masked")

# A map no larger than the window collapses to a single unshifted window.
print("7x7 map with M=7:", WindowGrid.for_map(7, 7, 7, shifted=True))

# Attention rows still form distributions once the mask is applied.
blk = WindowBlock(8, 2, 4, shifted=True, rng=np.random.default_rng(0)).to(np.float64)
blk.attend(Tensor(np.random.default_rng(1).standard_normal((1, 64, 8))), 8, 8)
probs = blk.attn.last_attn
print(f"attention tensor {probs.shape}; worst |row sum - 1| = {np.abs(probs.sum(-1) - 1).max():.1e}")
print(f"largest weight on a masked pair: {probs[-1][:, mask[-1] != 0].max():.1e}")
