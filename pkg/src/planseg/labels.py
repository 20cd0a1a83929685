"""Label conventions: semantic classes, tumor types, and patient label vectors."""

from __future__ import annotations

import numpy as np

from .volume import LesionInstance, Volume, connected_components

LABEL_BACKGROUND = 0
ORGAN_NAMES = ("liver", "gallbladder", "hepatic_vein", "spleen", "stomach", "pancreas")
LABEL_LIVER = 1
NUM_ORGANS = len(ORGAN_NAMES)  # semantic labels 1..6

TUMOR_TYPE_NAMES = ("HCC", "ICC", "meta", "hepato", "heman", "FNH", "cyst", "others")
NUM_TUMOR_TYPES = len(TUMOR_TYPE_NAMES)  # type ids 1..8, semantic labels 7..14
TYPE_IGNORED = 0
LABEL_IGNORED = 255

NUM_SEMANTIC_CLASSES = 1 + NUM_ORGANS + NUM_TUMOR_TYPES  # 15

MALIGNANT_TYPES = frozenset({1, 2, 3, 4})  # HCC, ICC, meta, hepato
BENIGN_TYPES = frozenset({5, 6, 7})  # heman, FNH, cyst
OTHERS_TYPE = 8  # neither benign nor malignant

# Patient label vector layout: 3 hierarchical labels + one per tumor type.
PATIENT_LABEL_NAMES = ("any_tumor", "any_benign", "any_malignant") + TUMOR_TYPE_NAMES
NUM_PATIENT_LABELS = len(PATIENT_LABEL_NAMES)  # 11


def tumor_label(type_id: int) -> int:
    """Semantic label of a tumor type (types 1..8 map to labels 7..14)."""
    if not 1 <= type_id <= NUM_TUMOR_TYPES:
        raise ValueError(f"tumor type id must be in 1..{NUM_TUMOR_TYPES}, got {type_id}")
    return NUM_ORGANS + type_id


def type_from_label(label: int) -> int:
    if not NUM_ORGANS + 1 <= label <= NUM_ORGANS + NUM_TUMOR_TYPES:
        raise ValueError(f"label {label} is not a tumor label")
    return label - NUM_ORGANS


def tumor_mask(semantic: np.ndarray) -> np.ndarray:
    """Binary tumor-vs-rest mask of a semantic label array (ignored label excluded)."""
    return (semantic > NUM_ORGANS) & (semantic <= NUM_ORGANS + NUM_TUMOR_TYPES)


def derive_patient_labels(instances: list[LesionInstance]) -> np.ndarray:
    """Existence flags over the 11-label hierarchy for a lesion instance list.

    Labels are [any_tumor, any_benign, any_malignant, HCC, ICC, meta, hepato,
    heman, FNH, cyst, others]. Type "others" raises any_tumor and its own bit
    but neither the benign nor the malignant flag. Ignored instances
    (type_id 0) contribute nothing.
    """
    labels = np.zeros(NUM_PATIENT_LABELS, dtype=np.int64)
    for inst in instances:
        t = inst.type_id
        if t == TYPE_IGNORED:
            continue
        if not 1 <= t <= NUM_TUMOR_TYPES:
            raise ValueError(f"unknown tumor type id {t}")
        labels[0] = 1
        if t in BENIGN_TYPES:
            labels[1] = 1
        if t in MALIGNANT_TYPES:
            labels[2] = 1
        labels[2 + t] = 1
    return labels


def instances_from_semantic(semantic: Volume, connectivity: int = 26) -> list[LesionInstance]:
    """Lesion instances of a semantic label volume: one CC analysis per tumor label.

    Lesions of different types touching each other are split by label before
    the CC analysis. Connected components of the ignored label (255) are
    returned as instances with ``type_id == TYPE_IGNORED``. Ids are assigned
    1..N after a deterministic (min z, min y, min x) sort over all instances.
    """
    arr = np.asarray(semantic.data)
    instances: list[LesionInstance] = []
    labels = [NUM_ORGANS + t for t in range(1, NUM_TUMOR_TYPES + 1)] + [LABEL_IGNORED]
    for lab in labels:
        mask = arr == lab
        if not mask.any():
            continue
        comps = connected_components(Volume(mask, semantic.spacing, semantic.origin), connectivity)
        type_id = TYPE_IGNORED if lab == LABEL_IGNORED else lab - NUM_ORGANS
        for comp in comps:
            comp.type_id = type_id
            instances.append(comp)
    instances.sort(key=lambda inst: inst.sort_key())
    for i, inst in enumerate(instances, start=1):
        inst.id = i
    return instances


def label_conventions() -> dict:
    """Machine-readable description of the label scheme (written into manifests)."""
    semantic = {str(LABEL_BACKGROUND): "background"}
    for i, name in enumerate(ORGAN_NAMES, start=1):
        semantic[str(i)] = name
    for t, name in enumerate(TUMOR_TYPE_NAMES, start=1):
        semantic[str(NUM_ORGANS + t)] = f"tumor:{name}"
    semantic[str(LABEL_IGNORED)] = "ignored"
    return {
        "axes": "(x, y, z), spacing in mm/voxel per axis",
        "semantic_labels": semantic,
        "tumor_type_ids": {str(t): name for t, name in enumerate(TUMOR_TYPE_NAMES, start=1)},
        "malignant_type_ids": sorted(MALIGNANT_TYPES),
        "benign_type_ids": sorted(BENIGN_TYPES),
        "patient_labels": list(PATIENT_LABEL_NAMES),
    }
