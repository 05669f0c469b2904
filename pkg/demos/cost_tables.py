"""Parameter and MAC budgets of the shipped presets at 224x224.

Nothing here touches weights: models are built with ``seed=None`` (all
zeros) and the analyzer walks the module tree symbolically.

    python demos/cost_tables.py
"""

from cetnet import analysis
from cetnet.model import PRESETS, build_model, cetnet_t, swin_t_ce_host

print(f"{'preset':<10} {'params':>10} {'MACs@224':>10}")
for name, make in PRESETS.items():
    if name == "tiny":
        continue
    model = build_model(make(), seed=None)
    print(f"{name:<10} {analysis.count_params(model) / 1e6:>9.2f}M {analysis.count_flops(model, 224, 224) / 1e9:>9.2f}G")

# Where does CETNet-T spend its budget? Stage 3 dominates both columns.
print()
print(analysis.format_table(analysis.report(build_model(cetnet_t(), seed=None), 224, 224), 224))

# Deeper convolutional embeddings on a Swin-T body: each extra pair of layers
# costs a fixed amount of parameters and a shrinking amount of compute per layer.
print("\nCE depth on the Swin-T host")
for k in (1, 3, 5, 7):
    model = build_model(swin_t_ce_host(k), seed=None)
    print(f"  k={k}: {analysis.count_params(model) / 1e6:.2f}M, {analysis.count_flops(model, 224, 224) / 1e9:.2f}G")

# The same body with every slot swapped between conv and transformer realisations.
print("\nCETNet-T widths under a few C/T patterns")
for pattern in ("C-T-C-T-C-T-C-T", "T-T-T-T-T-T-T-T", "C-C-C-C-C-C-C-C", "C-T-C-T-C-T-C-C", "C-C-C-T-C-T-C-T"):
    model = build_model(cetnet_t(pattern=pattern), seed=None)
    print(f"  {pattern}: {analysis.count_params(model) / 1e6:6.2f}M, "
          f"{analysis.count_flops(model, 224, 224) / 1e9:.2f}G")
