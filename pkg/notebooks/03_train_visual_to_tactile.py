# Train a small visual-to-tactile translator and score it with Colour-SSIM.
# Pass the iteration count as the first argument (2000 reproduces the overfit check).
import os
import sys
import time
from pathlib import Path

import numpy as np

from xmgc import data_pipeline as dp
from xmgc import evaluation as ev
from xmgc import training

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = Path(os.environ.get("XMGC_DEMO_OUT", "demo_out")) / "v2t"

pairs = dp.make_synthetic_pairs(8, 1, 64, seed=3)
cfg = training.TrainingConfig(
    direction="visual_to_tactile", resolution=64, batch_size=1, iterations=iterations,
    l1_weight=100.0, jitter_margin=4, seed=0, gen_depth=5, gen_base_filters=16, disc_base_filters=16)

start = time.time()


def progress(row):
    if row.iteration % max(1, iterations // 10) == 0:
        print(f"{row.iteration:5d}  L_D {row.loss_d:.3f}  L_G {row.loss_g:.3f}  L1 {row.loss_l1:.4f}"
              f"  {time.time() - start:.0f}s")


result = training.train(cfg, pairs, out, progress=progress)

generated = training.generate(result.checkpoint, [p.visual for p in pairs])
scores = [ev.colour_ssim(g, p.tactile).mean for g, p in zip(generated, pairs)]
print("per-image Colour-SSIM:", np.round(scores, 3))
print("mean:", round(float(np.mean(scores)), 4))

# input | generated | real tactile, one row per pair
sheet = np.concatenate([np.concatenate([p.visual, g, p.tactile], axis=1) for g, p in zip(generated, pairs)])
dp.save_image(sheet, out / "v2t_grid.png")

# the checkpoint reloads bit for bit
again = training.load_checkpoint(out / "final.xmgc")
print("reloaded identical:", training.checkpoint_bytes(again) == (out / "final.xmgc").read_bytes())
