"""Walkthrough: a universal patch against a trained detector, and where it pulls the proposals.

Needs a trained 128 px detector. Train one first (about ten minutes):

    patchforge gen-data --count 2000 --seed 1000 --out runs/train
    patchforge train --data runs/train --out runs/model

or pass another weights file as the first argument.
"""

# %%
import sys
from pathlib import Path

import numpy as np

from patchforge import attack as atk
from patchforge import eot
from patchforge import evalkit as ek
from patchforge.detector import MiniYOLO
from patchforge.scenegen import SceneConfig, make_dataset, save_png

weights = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/model/weights.pft")
model = MiniYOLO.load(weights)
scenes = make_dataset(1000, SceneConfig(), 400)
val = make_dataset(600_000, SceneConfig(), 60)
out = Path("demo_out")
out.mkdir(exist_ok=True)

# %% [markdown]
# Baseline: no patch, at the three confidence thresholds.

# %%
for rep in ek.evaluate_thresholds(val, model):
    print(f"baseline conf={rep.conf_threshold:<5g} mAP-50={rep.map:.3f}")

# %% [markdown]
# A short clipped sign-ascent run with EOT: 6 steps of 50 iterations, one restart.
# The full setting is 30 x 100 with five restarts.

# %%
cfg = atk.AttackConfig(method="pgd", clip=True, steps=6, iterations=50, restarts=1, val_every=3)
result = atk.run_attack(cfg, scenes, val, model, seed=1)
hist = result.histories[0]
print("loss per step:", np.round(hist.loss, 1))
print("validation mAP-50:", [round(m, 3) for m in hist.map50 if not np.isnan(m)])
for rep in ek.evaluate_thresholds(val, model, patch=result.patch, placement="random", seed=2):
    print(f"patched  conf={rep.conf_threshold:<5g} mAP-50={rep.map:.3f}")
save_png(out / "patch.png", result.patch)

# %% [markdown]
# Pre-NMS confidence heatmaps: with the patch in place, the strongest cell tends
# to sit on the patch rather than on the shapes.

# %%
samples = ek.placements("random", 20, 32, 128, seed=3)
grids = ek.predict(val.subset(range(20)), model, result.patch, samples)
hits = 0
for g, t in zip(grids, samples):
    heat = ek.roi_heatmap(g, model.config)
    r, c = np.unravel_index(np.argmax(heat), heat.shape)
    hits += bool(ek.footprint_cells(eot.warp_plan(t, 32, 128).mask, model.config)[r, c])
print(f"heatmap peak inside the patch on {hits}/20 images")
ek.save_heatmap(ek.roi_heatmap(grids[0], model.config), out / "heat0.png", out / "heat0.csv")
