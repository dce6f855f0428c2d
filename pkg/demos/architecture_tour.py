"""Build each variant at depth 4, print node counts, heads and parameter totals,
then prune a deeply supervised UNet++ down to each shallower level."""
from unetlab import arch
from unetlab.arch import DEFAULT_WIDTHS, ArchSpec
from unetlab.tensor import Rng

for variant in arch.VARIANTS:
    ds = variant != "unet"
    g = arch.build(ArchSpec(variant, 4, DEFAULT_WIDTHS, 1, ds, (1, 96, 96)), Rng(0))
    print(f"{variant:10s} nodes={len(arch.arch_nodes(g)):2d} heads={len(arch.heads(g))} "
          f"params={arch.param_count(g):,}")

full = arch.build(ArchSpec("unet_pp", 4, DEFAULT_WIDTHS, 1, True, (1, 96, 96)), Rng(0))
for k in (4, 3, 2, 1):
    sub = arch.prune(full, k)
    print(f"UNet++ L{k}: {len(arch.arch_nodes(sub))} nodes, {arch.param_count(sub):,} params")
