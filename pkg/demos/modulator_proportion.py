"""How the split between modulators and descriptors affects quality.

At a fixed parameter budget, widening the modulators leaves fewer channels
for the view-shared descriptors. This script trains one network per split
and prints PSNR and inter-view variance. Takes a few minutes.
"""

import lfkm
from lfkm.experiments import ablate_variants, match_budget, proportion_study

lf = lfkm.make_synthetic_lf("checkerboard-parallax", 32, 32, 5, 5, disparity=2.0, sharpness=4.0)
base = lfkm.NetworkConfig(32, 32, 5, 5, c_m=2, c_d=16)
budget = lfkm.param_count(base).total
schedule = lfkm.TrainSchedule(iterations=300)
print(f"budget: {budget} parameters")

for c_m in (2, 4, 6):
    cfg = match_budget(base, budget, c_m)
    print(f"  c_m={c_m} -> c_d={cfg.c_d}, params {lfkm.param_count(cfg).total}")

for row in proportion_study(lf, base, budget, (2, 4, 6), schedule):
    print(row.line())

# The same budget spent three ways: shared row/column modulators with basis
# coefficients (Net), one modulator set per view (Net*), dense kernels (Net†).
print()
for row in ablate_variants(lf, base, budget, schedule, seeds=(0,)).values():
    print(row.line())
