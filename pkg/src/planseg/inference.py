"""Decoding network outputs into lesion instances, semantic scores, and
patient-level probabilities, plus the mask-counting patient baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ExperimentConfig, InferConfig
from .dataset import liver_crop
from .labels import (
    BENIGN_TYPES,
    MALIGNANT_TYPES,
    NUM_PATIENT_LABELS,
    NUM_TUMOR_TYPES,
    TYPE_IGNORED,
    derive_patient_labels,
)
from .model import CaseOutput, LesionPatientNet, merge_semantic, stack_to_tensor
from .nifti import read_volume, write_volume
from .phantom import CaseRecord
from .volume import EmptyRegionError, LesionInstance, Volume, connected_components

PREDICTION_SCHEMA_VERSION = 1


@dataclass
class Prediction:
    """Decoded outputs for one case, on the full (uncropped) grid."""

    case_id: str
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    instances: list[LesionInstance]
    patient_scores: np.ndarray  # (11,) sigmoid of the patient logits
    mask_labels: np.ndarray  # (11,) existence flags derived from the instances
    mask_scores: np.ndarray  # (11,) volume-based scores derived from the instances
    semantic_scores: np.ndarray | None = None  # (C, cx, cy, cz) on the crop grid
    crop_box: tuple | None = None
    warning: str = ""

    def tumor_mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        for inst in self.instances:
            out[inst.voxels[:, 0], inst.voxels[:, 1], inst.voxels[:, 2]] = True
        return out


def panoptic_inference(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    out_shape: tuple[int, int, int],
    padded_shape: tuple[int, int, int],
    spacing,
    cfg: InferConfig,
) -> list[LesionInstance]:
    """Decode per-query predictions into disjoint typed instances.

    Queries whose best non-no-object probability reaches ``tau_query`` compete
    for voxels: each voxel goes to the query with the highest
    ``p(class) * sigmoid(mask)`` provided that score reaches ``tau_mask``.
    Each query's territory is split into connected components, components with
    an effective radius below ``min_radius_mm`` are dropped, and the instance
    confidence is the query probability times its mean mask sigmoid.
    """
    probs = class_logits.softmax(dim=-1)
    best_p, best_c = probs[:, :NUM_TUMOR_TYPES].max(dim=1)
    keep = torch.nonzero(best_p >= cfg.tau_query).flatten()
    if keep.numel() == 0:
        return []
    up = F.interpolate(
        mask_logits[keep].unsqueeze(0), size=padded_shape, mode="trilinear",
        align_corners=False,
    )[0][:, : out_shape[0], : out_shape[1], : out_shape[2]]
    sig = up.sigmoid()
    scores = best_p[keep].view(-1, 1, 1, 1) * sig
    max_score, winner = scores.max(dim=0)
    assigned = max_score >= cfg.tau_mask
    instances: list[LesionInstance] = []
    sig_np = sig.numpy()
    winner_np = winner.numpy()
    assigned_np = assigned.numpy()
    for k in range(keep.numel()):
        territory = assigned_np & (winner_np == k)
        if not territory.any():
            continue
        comps = connected_components(Volume(territory, spacing), connectivity=26)
        q_prob = float(best_p[keep[k]])
        type_id = int(best_c[keep[k]]) + 1
        for comp in comps:
            if comp.effective_radius_mm < cfg.min_radius_mm:
                continue
            comp.type_id = type_id
            mean_sig = float(
                sig_np[k, comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]].mean()
            )
            comp.confidence = q_prob * mean_sig
            instances.append(comp)
    instances.sort(key=lambda inst: inst.sort_key())
    for i, inst in enumerate(instances, start=1):
        inst.id = i
    return instances


def patient_scores(patient_logits) -> np.ndarray:
    """Elementwise sigmoid of the 11 patient logits."""
    logits = np.asarray(
        patient_logits.detach().numpy() if torch.is_tensor(patient_logits) else patient_logits,
        dtype=np.float64,
    )
    if logits.shape != (NUM_PATIENT_LABELS,):
        raise ValueError(f"expected {NUM_PATIENT_LABELS} logits, got shape {logits.shape}")
    return 1.0 / (1.0 + np.exp(-logits))


def patient_labels_from_mask(instances: list[LesionInstance]) -> tuple[np.ndarray, np.ndarray]:
    """Patient labels inferred from predicted instances by counting lesion volume.

    Binary flags reuse the ground-truth derivation rule; the continuous score
    of each label is the total predicted volume (mm^3) of the types it covers,
    usable for ROC construction.
    """
    typed = [inst for inst in instances if inst.type_id != TYPE_IGNORED]
    labels = derive_patient_labels(typed)
    scores = np.zeros(NUM_PATIENT_LABELS, dtype=np.float64)
    for inst in typed:
        scores[0] += inst.volume_mm3
        if inst.type_id in BENIGN_TYPES:
            scores[1] += inst.volume_mm3
        if inst.type_id in MALIGNANT_TYPES:
            scores[2] += inst.volume_mm3
        scores[2 + inst.type_id] += inst.volume_mm3
    return labels, scores


def _empty_prediction(rec: CaseRecord, warning: str) -> Prediction:
    labels, scores = patient_labels_from_mask([])
    return Prediction(
        case_id=rec.case_id,
        shape=rec.semantic.shape,
        spacing=rec.semantic.spacing,
        instances=[],
        patient_scores=np.zeros(NUM_PATIENT_LABELS),
        mask_labels=labels,
        mask_scores=scores,
        warning=warning,
    )


def predict_case(
    net: LesionPatientNet, cfg: ExperimentConfig, mode: str, rec: CaseRecord
) -> Prediction:
    """Full inference for one case: liver crop, forward pass, panoptic decode,
    semantic merging, and patient scores; instances are mapped back to the
    uncropped grid."""
    try:
        cropped, box = liver_crop(rec, cfg.infer.crop_margin_mm)
    except EmptyRegionError:
        return _empty_prediction(rec, "no liver region found; empty prediction")
    x = stack_to_tensor(cropped, mode, cfg.model)
    net.eval()
    with torch.no_grad():
        out: CaseOutput = net.forward_case(x, use_anchors=cfg.objective.anchor_queries)
        instances = panoptic_inference(
            out.class_logits,
            out.mask_logits,
            out.input_shape,
            out.padded_shape,
            rec.semantic.spacing,
            cfg.infer,
        )
        semantic_scores = merge_semantic(out.class_logits, out.mask_logits).numpy()
        p_scores = patient_scores(out.patient_logits)
    offset = np.array([s.start for s in box], dtype=np.int32)
    instances = [inst.shifted(offset) for inst in instances]
    mask_labels, mask_scores = patient_labels_from_mask(instances)
    return Prediction(
        case_id=rec.case_id,
        shape=rec.semantic.shape,
        spacing=rec.semantic.spacing,
        instances=instances,
        patient_scores=p_scores,
        mask_labels=mask_labels,
        mask_scores=mask_scores,
        semantic_scores=semantic_scores,
        crop_box=tuple((s.start, s.stop) for s in box),
    )


def write_prediction(pred: Prediction, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = np.zeros(pred.shape, dtype=np.uint16)
    for inst in pred.instances:
        ids[inst.voxels[:, 0], inst.voxels[:, 1], inst.voxels[:, 2]] = inst.id
    write_volume(out_dir / "pred_instances.nii.gz", Volume(ids, pred.spacing))
    payload = {
        "schema_version": PREDICTION_SCHEMA_VERSION,
        "case_id": pred.case_id,
        "shape": list(pred.shape),
        "spacing": list(pred.spacing),
        "patient_scores": [float(v) for v in pred.patient_scores],
        "mask_labels": [int(v) for v in pred.mask_labels],
        "mask_scores": [float(v) for v in pred.mask_scores],
        "crop_box": list(pred.crop_box) if pred.crop_box else None,
        "warning": pred.warning,
        "instances": [
            {
                "id": inst.id,
                "type_id": inst.type_id,
                "confidence": inst.confidence,
                "voxel_count": inst.voxel_count,
                "volume_mm3": inst.volume_mm3,
                "effective_radius_mm": inst.effective_radius_mm,
            }
            for inst in pred.instances
        ],
    }
    (out_dir / "prediction.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def read_prediction(pred_dir) -> Prediction:
    pred_dir = Path(pred_dir)
    meta = json.loads((pred_dir / "prediction.json").read_text())
    vol = read_volume(pred_dir / "pred_instances.nii.gz")
    instances = []
    for entry in meta["instances"]:
        voxels = np.argwhere(vol.data == entry["id"]).astype(np.int32)
        inst = LesionInstance(
            id=entry["id"],
            type_id=entry["type_id"],
            voxels=voxels,
            volume_mm3=entry["volume_mm3"],
            effective_radius_mm=entry["effective_radius_mm"],
            confidence=entry["confidence"],
        )
        instances.append(inst)
    return Prediction(
        case_id=meta["case_id"],
        shape=tuple(meta["shape"]),
        spacing=tuple(meta["spacing"]),
        instances=instances,
        patient_scores=np.asarray(meta["patient_scores"], dtype=np.float64),
        mask_labels=np.asarray(meta["mask_labels"], dtype=np.int64),
        mask_scores=np.asarray(meta["mask_scores"], dtype=np.float64),
        crop_box=tuple(tuple(b) for b in meta["crop_box"]) if meta["crop_box"] else None,
        warning=meta.get("warning", ""),
    )
