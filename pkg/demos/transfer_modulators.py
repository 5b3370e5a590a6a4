"""Reuse modulators learned on one scene to fit another from a few views.

The pretrained modulators stay frozen. Only view-shared parameters are
retrained, on a sparse subset of the new scene's views, and then every view
is rendered. Takes a few minutes.
"""

import numpy as np

import lfkm

X = Y = 32
U = V = 9
source = lfkm.make_synthetic_lf("checkerboard-parallax", X, Y, U, V, disparity=1.0, sharpness=4.0, variant=0)
target = lfkm.make_synthetic_lf("checkerboard-parallax", X, Y, U, V, disparity=1.0, sharpness=4.0, variant=1)

cfg = lfkm.NetworkConfig(X, Y, U, V, c_m=2, c_d=16)
pretrained, _ = lfkm.train(cfg, lfkm.TrainSchedule(iterations=600), source)
print(f"pretrained on source: {lfkm.evaluate(pretrained, source).mean:.2f} dB")

for name in ("S5", "S9", "S25"):
    subset = lfkm.pattern(name, U, V)
    result = lfkm.transfer(pretrained, target, subset, lfkm.TrainSchedule(epochs=1, uses_per_sai_per_epoch=60))
    print(f"{name}: {len(subset.coordinates):2d} training views, "
          f"{int(result.involved.sum()):2d} involved, "
          f"involved {result.involved_mean:.2f} dB, uninvolved {result.uninvolved_mean:.2f} dB")

# Involved views (x) are those whose row and column both appear in the subset.
print(np.where(result.involved, "x", ".").astype(object).sum(axis=1))
