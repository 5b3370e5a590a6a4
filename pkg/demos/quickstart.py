"""Encode a small synthetic light field, write it to disk and decode it back.

Run with ``python3 demos/quickstart.py``. Takes under a minute on one core.
"""

import tempfile
from pathlib import Path

import numpy as np

import lfkm

# A 32x32 pixel scene seen from a 3x3 grid of viewpoints. Neighbouring views
# are shifted by one pixel, like a small camera array looking at a plane.
lf = lfkm.make_synthetic_lf("checkerboard-parallax", 32, 32, 3, 3, disparity=1.0, period=8)
print("light field extents (X, Y, U, V):", lf.extents)

# Thin descriptors keep the demo fast. Every view gets its kernels from the
# shared descriptors plus one row and one column modulator.
cfg = lfkm.NetworkConfig(32, 32, 3, 3, c_m=2, c_d=8, n=64)
count = lfkm.param_count(cfg)
print(f"parameters: {count.total}  (modulator share {100 * count.modulator_share:.1f}%)")

schedule = lfkm.TrainSchedule(iterations=400, quant_epoch_uses=20, seed=0)
bank, report = lfkm.train(cfg, schedule, lf)
print(f"float model: mean PSNR {lfkm.evaluate(bank, lf).mean:.2f} dB")

# Quantize layer by layer, then pack everything into one byte string.
model = lfkm.quantize_model(bank, lf, schedule)
data = lfkm.serialize(model)
bpp = lfkm.compute_bpp(data, *lf.extents)
print(f"file: {len(data)} bytes, {bpp:.4f} bits per pixel")

# Round trip through disk. Decoding needs nothing but the file.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "scene.lfkm"
    path.write_bytes(data)
    decoded = lfkm.deserialize(path.read_bytes()).to_bank()
    result = lfkm.evaluate(decoded, lf)

print(f"decoded: mean PSNR {result.mean:.2f} dB, inter-view variance {result.variance:.4f}")
print("per-view PSNR (dB):")
print(np.array2string(result.table, precision=2))
