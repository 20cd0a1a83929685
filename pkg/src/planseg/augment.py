"""Training-time augmentation: one spatial transform shared by phases and labels.

Spatial transforms (scale, elastic, flip, crop) are applied identically to all
phases and to the semantic label volume (nearest-neighbor); brightness touches
intensities only. Instances are re-derived by connected components after any
spatial transform, which keeps the instance list consistent with the label
volume by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .labels import LABEL_IGNORED, derive_patient_labels, instances_from_semantic, tumor_mask
from .phantom import CaseRecord, PhaseStack
from .volume import Volume

PAD_INTENSITY = -50.0  # raw intensity for voxels conjured by padding


@dataclass
class AugmentPolicy:
    crop: bool = False
    crop_shape: tuple[int, int, int] | None = None
    crop_fg_bias: float = 0.5  # probability of centering the crop on a lesion voxel
    scale: bool = False
    scale_range: tuple[float, float] = (0.9, 1.15)
    flip: bool = False
    flip_axes: tuple[int, ...] = (0, 1)
    flip_prob: float = 0.5
    elastic: bool = False
    elastic_control_spacing: int = 8  # control-grid spacing in voxels (>= 8)
    elastic_magnitude_mm: float = 2.5
    brightness: bool = False
    brightness_shift: float = 10.0  # additive, drawn uniformly per phase

    @classmethod
    def all_off(cls) -> "AugmentPolicy":
        return cls()

    def any_enabled(self) -> bool:
        return any((self.crop, self.scale, self.flip, self.elastic, self.brightness))


def _warp_coords(rng, shape, spacing, policy: AugmentPolicy) -> np.ndarray | None:
    coords = None
    if policy.scale:
        factor = float(rng.uniform(*policy.scale_range))
        center = (np.array(shape, dtype=np.float32) - 1) / 2
        grid = np.indices(shape, dtype=np.float32)
        coords = center[:, None, None, None] + (grid - center[:, None, None, None]) / factor
    if policy.elastic:
        if coords is None:
            coords = np.indices(shape, dtype=np.float32)
        cs = max(int(policy.elastic_control_spacing), 8)
        ctrl_shape = tuple(max(int(np.ceil(n / cs)) + 1, 2) for n in shape)
        for axis in range(3):
            disp = rng.standard_normal(ctrl_shape).astype(np.float32)
            disp *= policy.elastic_magnitude_mm / spacing[axis]
            zoom = [n / c for n, c in zip(shape, ctrl_shape)]
            full = ndimage.zoom(disp, zoom, order=1, mode="nearest")
            coords[axis] += full[: shape[0], : shape[1], : shape[2]]
    return coords


def _crop_box(rng, shape, semantic, policy: AugmentPolicy):
    cs = policy.crop_shape
    target = [min(c, n) for c, n in zip(cs, shape)]
    fg = np.argwhere(tumor_mask(semantic)) if policy.crop_fg_bias > 0 else np.empty((0, 3))
    use_fg = len(fg) > 0 and rng.random() < policy.crop_fg_bias
    center = fg[int(rng.integers(len(fg)))] if use_fg else None
    starts = []
    for axis in range(3):
        hi = shape[axis] - target[axis]
        if center is not None:
            start = int(np.clip(int(center[axis]) - target[axis] // 2, 0, hi))
        else:
            start = int(rng.integers(0, hi + 1))
        starts.append(start)
    return tuple(slice(s, s + t) for s, t in zip(starts, target))


def _pad_to(arr: np.ndarray, shape, value) -> np.ndarray:
    pads = [(0, max(0, t - s)) for s, t in zip(arr.shape, shape)]
    if all(p == (0, 0) for p in pads):
        return arr
    return np.pad(arr, pads, mode="constant", constant_values=value)


def augment(rec: CaseRecord, seed: int, policy: AugmentPolicy) -> CaseRecord:
    """Random augmentation of one case, deterministic given ``seed``.

    With every transform disabled this is the identity (instances and labels
    are passed through untouched).
    """
    if not policy.any_enabled():
        return rec
    rng = np.random.default_rng(seed)
    spacing = rec.semantic.spacing
    phases = [ph.data.astype(np.float32) for ph in rec.stack.phases]
    semantic = rec.semantic.data.copy()
    origin = rec.semantic.origin

    coords = _warp_coords(rng, semantic.shape, spacing, policy)
    if coords is not None:
        phases = [
            ndimage.map_coordinates(ph, coords, order=1, mode="nearest") for ph in phases
        ]
        semantic = ndimage.map_coordinates(semantic, coords, order=0, mode="nearest")

    if policy.flip:
        for axis in policy.flip_axes:
            if rng.random() < policy.flip_prob:
                phases = [np.flip(ph, axis=axis) for ph in phases]
                semantic = np.flip(semantic, axis=axis)
    phases = [np.ascontiguousarray(ph) for ph in phases]
    semantic = np.ascontiguousarray(semantic)

    if policy.crop and policy.crop_shape is not None:
        box = _crop_box(rng, semantic.shape, semantic, policy)
        offset = np.array([s.start for s in box], dtype=float)
        origin = tuple(np.asarray(origin) + offset * np.asarray(spacing))
        phases = [ph[box] for ph in phases]
        semantic = semantic[box]
        phases = [_pad_to(ph, policy.crop_shape, PAD_INTENSITY) for ph in phases]
        semantic = _pad_to(semantic, policy.crop_shape, LABEL_IGNORED)

    if policy.brightness:
        # one shift for the whole exam: inter-phase contrast is diagnostic
        # signal and must survive augmentation
        shift = float(rng.uniform(-policy.brightness_shift, policy.brightness_shift))
        phases = [ph + shift for ph in phases]

    sem_vol = Volume(semantic, spacing, origin)
    instances = instances_from_semantic(sem_vol)
    return CaseRecord(
        case_id=rec.case_id,
        cohort=rec.cohort,
        stack=PhaseStack(
            phases=tuple(Volume(ph.astype(np.float32), spacing, origin) for ph in phases),
            case_id=rec.case_id,
        ),
        semantic=sem_vol,
        instances=instances,
        patient_labels=derive_patient_labels(instances),
    )
