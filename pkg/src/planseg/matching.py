"""Bipartite assignment between queries and ground-truth lesion instances.

The cost of pairing a query with a target reuses the training loss weights:
``w_class * (-p(type)) + w_mask * (point BCE + point Dice)``, with one shared
point set across all pairs for fairness. The optimal assignment is solved
exactly (Hungarian); unmatched queries are implicitly no-object.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import ObjectiveConfig
from .pointsample import PointSample, sample_mask_logits, sample_target_masks
from .volume import LesionInstance


@dataclass
class MatchResult:
    """Injective query-to-target assignment plus the cost matrix it came from."""

    query_indices: np.ndarray  # (P,) matched query rows
    target_indices: np.ndarray  # (P,) matched target columns
    cost_matrix: np.ndarray  # (Nq, Nt)

    @property
    def num_pairs(self) -> int:
        return len(self.query_indices)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.query_indices.tolist(), self.target_indices.tolist()))

    def target_of_query(self, n_queries: int) -> np.ndarray:
        """Per-query target index, -1 for no-object queries."""
        out = np.full(n_queries, -1, dtype=np.int64)
        out[self.query_indices] = self.target_indices
        return out


def pairwise_point_costs(
    pred_logits: torch.Tensor, target_values: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise binary CE and Dice cost between query masks and target masks.

    ``pred_logits`` is (Nq, P) mask logits at the shared points and
    ``target_values`` is (Nt, P) binary values. Returns (bce, dice), each
    (Nq, Nt). Dice cost uses a tiny epsilon only to guard the empty/empty case.
    """
    n_points = pred_logits.shape[1]
    pos = torch.nn.functional.binary_cross_entropy_with_logits(
        pred_logits, torch.ones_like(pred_logits), reduction="none"
    )
    neg = torch.nn.functional.binary_cross_entropy_with_logits(
        pred_logits, torch.zeros_like(pred_logits), reduction="none"
    )
    bce = (torch.einsum("qp,tp->qt", pos, target_values)
           + torch.einsum("qp,tp->qt", neg, 1 - target_values)) / n_points
    probs = pred_logits.sigmoid()
    inter = torch.einsum("qp,tp->qt", probs, target_values)
    denom = probs.sum(dim=1, keepdim=True) + target_values.sum(dim=1).unsqueeze(0)
    eps = 1e-6
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return bce, dice


def build_cost_matrix(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    targets: list[LesionInstance],
    points: PointSample,
    cfg: ObjectiveConfig,
    shape,
) -> np.ndarray:
    with torch.no_grad():
        probs = class_logits.softmax(dim=-1)
        type_cols = torch.as_tensor(
            [t.type_id - 1 for t in targets], dtype=torch.long, device=class_logits.device
        )
        cost_class = -probs[:, type_cols]
        pred_at = sample_mask_logits(mask_logits, points.coords)
        tgt_at = torch.as_tensor(
            sample_target_masks(targets, points.coords, shape),
            dtype=pred_at.dtype,
            device=pred_at.device,
        )
        bce, dice = pairwise_point_costs(pred_at, tgt_at)
        cost = cfg.lambda_lesion_class * cost_class + cfg.lambda_lesion_mask * (bce + dice)
    return cost.double().cpu().numpy()


def match_queries(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    targets: list[LesionInstance],
    points: PointSample,
    cfg: ObjectiveConfig,
    shape,
) -> MatchResult:
    """Minimum-cost assignment of queries to targets (empty targets: no pairs)."""
    n_q = class_logits.shape[0]
    if not targets:
        return MatchResult(
            query_indices=np.empty(0, dtype=np.int64),
            target_indices=np.empty(0, dtype=np.int64),
            cost_matrix=np.zeros((n_q, 0)),
        )
    cost = build_cost_matrix(class_logits, mask_logits, targets, points, cfg, shape)
    rows, cols = linear_sum_assignment(cost)
    return MatchResult(query_indices=rows, target_indices=cols, cost_matrix=cost)
