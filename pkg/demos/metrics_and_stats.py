"""Exact IoU/Dice from confusion counts and a Welch t-test between two sets of scores."""
import numpy as np

from unetlab import hybrid_loss, two_sample_ttest
from unetlab.losses import ConfusionCounts

y = np.zeros((8, 8), dtype=bool)
y[2:6, 2:6] = True
p = np.zeros((8, 8), dtype=bool)
p[3:7, 2:6] = True
exact = ConfusionCounts.from_masks(y, p).exact()
print(f"IoU={exact['IoU']} Dice={exact['Dice']}")

loss = hybrid_loss(np.array([1.0, 0.0]).reshape(1, 1, 1, 2), np.array([0.8, 0.3]).reshape(1, 1, 1, 2))[0]
print(f"hybrid loss on a two-pixel example: {loss:.5f}")

res = two_sample_ttest([0.81, 0.84, 0.79, 0.90, 0.86], [0.78, 0.80, 0.77, 0.85, 0.74])
print(f"t={res.t:.3f} p={res.p:.4f}")
