"""
A small end-to-end hyperparameter search
========================================

The full pipeline on a problem small enough to finish in a few minutes on
one CPU core: synthetic blob images, a depth-2 U-Net, three particles and
two generations after the initial one. The same steps run at larger scale
through ``swseg optimize``.
"""

import numpy as np

from swseg import SwarmConfig, SynthSpec, TrainSettings, UNetObjective, generate, optimize, split, unet_space
from swseg.metrics import evaluate
from swseg.objective import config_from_decoded, fit
from swseg.train import binarize, predict

#%%
# Data: 60 noisy 32x32 images with one or two bright blobs each.

data = generate(SynthSpec(count=60, size=32, radius=(3.0, 7.0), seed=0))
train_set, val_set = split(data, 0.8, seed=0)
print(f"{len(train_set)} training / {len(val_set)} validation images")
fg = np.mean([s.mask.mean() for s in data.samples])
print(f"mean foreground fraction {fg:.3f}")

#%%
# Each particle trains a fresh network for a few epochs and reports
# 1 - (best validation Dice) as its fitness.

settings = TrainSettings(epochs=6, batch_size=16, seed=0)
objective = UNetObjective.from_datasets(train_set, val_set, settings, depth=2)
result = optimize(unet_space(), objective, SwarmConfig(n_particles=3, iters=2, seed=0))

for e in result.trace.evaluations:
    d = e.decoded
    print(f"gen {e.iteration} particle {e.particle}: filters={d['filters']:2d} kernel={d['kernel']} "
          f"lr={d['lr']:.5f} fitness={e.fitness:.4f}")
print("best:", result.best, f"fitness {result.best_f:.4f}")

#%%
# Retrain the winning configuration and score it per image.

final = fit(config_from_decoded(result.best, 2), train_set, val_set, settings)
images = val_set.images()
pred = binarize(predict(final.model, images))
reports = [evaluate(p[0], s.mask) for p, s in zip(pred, val_set.samples)]
print(f"\nvalidation: mean dsc {np.mean([r.dsc for r in reports]):.4f}, "
      f"mean iou {np.mean([r.iou for r in reports]):.4f}")
