"""The five training loss terms and their weighted total.

All terms are plain functions of tensors so they work at any precision (the
gradient-check suite runs them in float64) and stay independent of how their
inputs were produced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ObjectiveConfig
from .labels import LABEL_IGNORED, NUM_SEMANTIC_CLASSES, NUM_TUMOR_TYPES
from .matching import MatchResult
from .pointsample import PointSample, sample_mask_logits, sample_target_masks
from .volume import LesionInstance


class NonFiniteLossError(RuntimeError):
    """A loss component came out NaN/Inf; the message names the offending term."""


@dataclass
class LossBreakdown:
    l_pixel: float = 0.0
    l_lesion_class: float = 0.0
    l_lesion_mask: float = 0.0
    l_patient: float = 0.0
    l_consist: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {
            "l_pixel": self.l_pixel,
            "l_lesion_class": self.l_lesion_class,
            "l_lesion_mask": self.l_lesion_mask,
            "l_patient": self.l_patient,
            "l_consist": self.l_consist,
            "total": self.total,
        }


def loss_pixel(pixel_logits: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
    """Cross-entropy plus mean multi-class soft Dice, ignoring label 255.

    Dice is averaged over all semantic classes with +1 smoothing, so classes
    absent from both prediction and target contribute ~0. An all-ignored
    target gives exactly 0 with zero gradient.
    """
    valid = semantic != LABEL_IGNORED
    if not bool(valid.any()):
        return pixel_logits.sum() * 0.0
    ce = F.cross_entropy(
        pixel_logits.unsqueeze(0), semantic.unsqueeze(0).long(), ignore_index=LABEL_IGNORED
    )
    flat_logits = pixel_logits.permute(1, 2, 3, 0)[valid]  # (Nv, C)
    probs = flat_logits.softmax(dim=-1)
    one_hot = F.one_hot(semantic[valid].long(), NUM_SEMANTIC_CLASSES).to(probs.dtype)
    inter = (probs * one_hot).sum(dim=0)
    denom = probs.sum(dim=0) + one_hot.sum(dim=0)
    dice = 1.0 - (2.0 * inter + 1.0) / (denom + 1.0)
    return ce + dice.mean()


def loss_lesion(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    match: MatchResult,
    points: PointSample,
    targets: list[LesionInstance],
    shape,
    no_object_weight: float = 0.1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Class CE over all queries and point-sampled mask BCE+Dice over matched ones.

    The no-object class carries the reduced weight; the mask term averages the
    per-pair (mean BCE + Dice cost) over matched pairs, evaluated at the
    shared point set.
    """
    n_q = class_logits.shape[0]
    device = class_logits.device
    target_class = torch.full((n_q,), NUM_TUMOR_TYPES, dtype=torch.long, device=device)
    for qi, tj in match.pairs():
        target_class[qi] = targets[tj].type_id - 1
    weight = torch.ones(NUM_TUMOR_TYPES + 1, dtype=class_logits.dtype, device=device)
    weight[NUM_TUMOR_TYPES] = no_object_weight
    l_class = F.cross_entropy(class_logits, target_class, weight=weight)

    if match.num_pairs == 0:
        return l_class, mask_logits.sum() * 0.0
    pred_at = sample_mask_logits(mask_logits[match.query_indices], points.coords)
    matched_targets = [targets[t] for t in match.target_indices]
    tgt_at = torch.as_tensor(
        sample_target_masks(matched_targets, points.coords, shape),
        dtype=pred_at.dtype,
        device=device,
    )
    bce = F.binary_cross_entropy_with_logits(pred_at, tgt_at, reduction="none").mean(dim=1)
    probs = pred_at.sigmoid()
    eps = 1e-6
    inter = (probs * tgt_at).sum(dim=1)
    denom = probs.sum(dim=1) + tgt_at.sum(dim=1)
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    l_mask = (bce + dice).mean()
    return l_class, l_mask


def loss_patient(patient_logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean binary cross-entropy over the 11 patient labels."""
    target = torch.as_tensor(
        np.asarray(labels), dtype=patient_logits.dtype, device=patient_logits.device
    )
    return F.binary_cross_entropy_with_logits(patient_logits, target)


def loss_consistency(class_logits: torch.Tensor, patient_logits: torch.Tensor) -> torch.Tensor:
    """Squared L2 between patient fine-grained probabilities and the per-class
    max over query probabilities (no-object slot discarded before the max)."""
    query_probs = class_logits.softmax(dim=-1)[:, :NUM_TUMOR_TYPES]
    pooled = query_probs.max(dim=0).values
    patient_probs = patient_logits[-NUM_TUMOR_TYPES:].sigmoid()
    return ((patient_probs - pooled) ** 2).sum()


def total_loss(
    components: dict[str, torch.Tensor],
    cfg: ObjectiveConfig,
    stage1: bool = False,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted sum of the five components; stage 1 keeps only the pixel term.

    Raises NonFiniteLossError naming the first non-finite component so a bad
    step can be aborted with a useful diagnostic.
    """
    names = ("l_pixel", "l_lesion_class", "l_lesion_mask", "l_patient", "l_consist")
    weights = {
        "l_pixel": cfg.lambda_pixel,
        "l_lesion_class": cfg.lambda_lesion_class,
        "l_lesion_mask": cfg.lambda_lesion_mask,
        "l_patient": cfg.lambda_patient,
        "l_consist": cfg.lambda_consistency,
    }
    vals = {}
    for name in names:
        value = components.get(name)
        if value is None:
            value = torch.zeros(())
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"loss component {name} is not finite: {value}")
        vals[name] = value
    if stage1:
        total = weights["l_pixel"] * vals["l_pixel"]
    else:
        total = sum(weights[name] * vals[name] for name in names)
    breakdown = LossBreakdown(
        l_pixel=float(vals["l_pixel"].detach()),
        l_lesion_class=float(vals["l_lesion_class"].detach()),
        l_lesion_mask=float(vals["l_lesion_mask"].detach()),
        l_patient=float(vals["l_patient"].detach()),
        l_consist=float(vals["l_consist"].detach()),
        total=float(total.detach()),
    )
    return total, breakdown
