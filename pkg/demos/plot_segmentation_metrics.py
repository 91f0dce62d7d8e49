"""
Overlap and distance metrics on toy masks
=========================================

Overlap scores (Dice, IoU) barely notice a few stray pixels far from the
object, while boundary distances react strongly to them. Here is a small
demonstration, followed by the correlation analysis used for reporting.
"""

import numpy as np

from swseg.metrics import evaluate, f1_from_pr, pearson_matrix

yy, xx = np.mgrid[:48, :48]
truth = (yy - 24) ** 2 + (xx - 24) ** 2 <= 10 ** 2

#%%
# Three predictions: a one-pixel shift, a shrunken disc and a good disc with
# a single false-positive pixel in the corner.

shifted = np.roll(truth, 1, axis=1)
shrunk = (yy - 24) ** 2 + (xx - 24) ** 2 <= 8 ** 2
speck = truth.copy()
speck[2, 2] = True

for name, pred in [("shifted", shifted), ("shrunk", shrunk), ("speck", speck)]:
    r = evaluate(pred, truth)
    print(f"{name:8s} dsc={r.dsc:.4f} iou={r.iou:.4f} hd={r.hd:6.3f} assd={r.assd:.3f}")

#%%
# The speck leaves Dice almost untouched but drives the Hausdorff distance
# to the distance between the corner and the disc.
#
# Next, a consistency check on published per-class numbers: F1 recomputed
# from precision and recall, and the correlation between accuracy and F1.

rows = {
    "T1": (0.9960, 0.9311, 0.9415, 0.9362),
    "T2": (0.9961, 0.9528, 0.9205, 0.9364),
    "T1Gd": (0.9945, 0.9265, 0.8944, 0.9102),
    "FLAIR": (0.9968, 0.9547, 0.9405, 0.9475),
    "Meningioma": (0.9989, 0.9675, 0.9696, 0.9685),
    "Glioma": (0.9984, 0.9738, 0.9519, 0.9627),
    "Pituitary": (0.9993, 0.9596, 0.9593, 0.9594),
}
print()
for name, (acc, p, r, f1) in rows.items():
    print(f"{name:11s} F1 printed {f1:.4f}, from P/R {f1_from_pr(p, r):.4f}")

names = ["accuracy", "precision", "recall", "f1"]
m = pearson_matrix(list(rows.values()))
print("\n" + " " * 10 + "".join(f"{n:>10s}" for n in names))
for n, row in zip(names, m):
    print(f"{n:10s}" + "".join(f"{v:10.3f}" for v in row))
