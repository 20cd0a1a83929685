"""The training objective up close: shared point sets with guaranteed
foreground samples, query-target assignment costs, and the weighted total.

Run:  python demos/03_losses_and_matching.py
"""

import numpy as np
import torch

from planseg.config import ObjectiveConfig
from planseg.losses import loss_lesion, total_loss
from planseg.matching import match_queries
from planseg.pointsample import KIND_FES, sample_points
from planseg.volume import make_instance

torch.manual_seed(0)
shape = (64, 64, 16)
spacing = (0.7, 0.7, 5.0)
cfg = ObjectiveConfig()

# two ground-truth lesions: a big one and a 2-voxel speck
big = make_instance(1, 3, np.argwhere(np.ones((10, 10, 3), dtype=bool)) + [10, 10, 4], spacing)
speck = make_instance(2, 7, np.array([[50, 50, 12], [50, 51, 12]]), spacing)
targets = [big, speck]

n_queries = 6
class_logits = torch.randn(n_queries, 9)
mask_logits = torch.randn(n_queries, 16, 16, 16)  # stride (4, 4, 1) grid

points = sample_points(mask_logits, targets, shape, k=cfg.num_points,
                       n_fg=cfg.fg_points, seed=0)
fes = points.fes_counts(len(targets))
print(f"point set: {len(points)} points = K={cfg.num_points} + {fes.sum()} guaranteed fg")
print(f"guaranteed foreground per target: {fes.tolist()} (speck has only 2 voxels)")
uniform_hits = int(
    (np.floor(points.coords[points.kind != KIND_FES]).astype(int)[:, None]
     == speck.voxels[None]).all(-1).any(-1).sum()
)
print(f"K-point hits on the speck without the guarantee: {uniform_hits}")

match = match_queries(class_logits, mask_logits, targets, points, cfg, shape)
print(f"\ncost matrix ({match.cost_matrix.shape[0]} queries x "
      f"{match.cost_matrix.shape[1]} targets):")
print(np.round(match.cost_matrix, 2))
print(f"assignment: {match.pairs()} (unmatched queries train toward no-object)")

l_class, l_mask = loss_lesion(class_logits, mask_logits, match, points, targets, shape,
                              cfg.no_object_weight)
components = {
    "l_pixel": torch.tensor(1.0),
    "l_lesion_class": l_class,
    "l_lesion_mask": l_mask,
    "l_patient": torch.tensor(0.5),
    "l_consist": torch.tensor(0.1),
}
total, breakdown = total_loss(components, cfg)
print("\nweighted total with weights (2, 2, 5, 1, 0.1):")
for k, v in breakdown.as_dict().items():
    print(f"  {k:16s} {v:.4f}")

_, stage1 = total_loss(components, cfg, stage1=True)
print(f"stage-1 pretraining total (pixel term only): {stage1.total:.4f}")
