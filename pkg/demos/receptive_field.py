"""Effective receptive fields: deeper convolutional embeddings see farther.

Writes one PGM per setting so the maps can be opened in any image viewer.

    python demos/receptive_field.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from cetnet import analysis
from cetnet.embedding import ConvEmbed
from cetnet.model import build_model, tiny

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(".")
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)
probe = rng.standard_normal((4, 16, 32, 32))

# One embedding block in isolation: support grows with every stacked 3x3 depthwise conv.
for k in (1, 3, 5, 7):
    grid = analysis.erf_map(ConvEmbed(16, k, rng=np.random.default_rng(1)), 1, probe)
    analysis.write_pgm(out / f"erf_ce{k}.pgm", grid)
    print(f"CE depth {k}: {analysis.erf_support(grid):4d} input cells above 1e-3")

# Whole networks, sampled after each stage of a conv-embedded and a patchified layout.
images = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
for pattern in ("C-T-C-T-C-T-C-T", "T-T-T-T-T-T-T-T"):
    model = build_model(tiny(pattern=pattern, input_size=64), seed=0)
    sizes = []
    for stage in (1, 2, 3, 4):
        grid = analysis.erf_map(model, stage, images)
        analysis.write_pgm(out / f"erf_{pattern.replace('-', '')}_s{stage}.pgm", grid)
        sizes.append(analysis.erf_support(grid))
    print(f"{pattern}: support after stages 1-4 = {sizes}")
