# Synthetic visual/tactile pairs: what the desk-scale experiments train on.
import os
import sys
from pathlib import Path

import numpy as np

from xmgc import data_pipeline as dp
from xmgc import evaluation as ev

out = Path(os.environ.get("XMGC_DEMO_OUT", "demo_out"))
out.mkdir(parents=True, exist_ok=True)
classes = int(sys.argv[1]) if len(sys.argv) > 1 else 11

pairs = dp.make_synthetic_pairs(classes, 2, 64, seed=0)
for c in range(min(classes, 4)):
    print(c, dp.texture_params(c))

# one row per class: visual, tactile, then a second sample of the same class
rows = []
for c in range(classes):
    a, b = [p for p in pairs if p.class_id == c]
    rows.append(np.concatenate([a.visual, a.tactile, b.visual, b.tactile], axis=1))
sheet = np.concatenate(rows, axis=0)
dp.save_image(sheet, out / "textures.png")
print("contact sheet:", out / "textures.png", sheet.shape)

# Colour-SSIM between the two sides of a pair is low; the mapping is not the identity
a = pairs[0]
print("visual vs tactile:", round(ev.colour_ssim(a.visual, a.tactile).mean, 4))
# same class, different phase
print("tactile vs tactile (same class):", round(ev.colour_ssim(a.tactile, pairs[1].tactile).mean, 4))
print("windowed:", round(ev.colour_ssim(a.tactile, pairs[1].tactile, mode="windowed").mean, 4))

# jitter-crop is the noise source: each draw shifts the crop window
rng = np.random.default_rng(1)
big = dp.resize(a.tactile, 72)
crops = [dp.jitter_crop(big, 64, 8, rng) for _ in range(3)]
print("jitter crops differ:", not np.array_equal(crops[0], crops[1]))
