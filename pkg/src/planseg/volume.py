"""Geometry-aware 3D grid primitives shared by every other module.

Conventions used throughout the package:

* array axes are ``(x, y, z)``; in-plane axes come first, slice axis last
* ``spacing`` is mm per voxel along ``(x, y, z)``
* voxel ``(i, j, k)`` sits at physical position ``origin + (i*sx, j*sy, k*sz)``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class EmptyRegionError(ValueError):
    """Raised when an operation requires a non-empty region (e.g. no liver found)."""


@dataclass(eq=False)
class Volume:
    """A dense 3D scalar grid with physical spacing and origin.

    ``data`` holds intensities (float) or integer labels; all volumes of one
    case share a single grid.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three strictly positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing)
            and np.allclose(self.origin, other.origin)
        )

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing, self.origin)


@dataclass(eq=False)
class LesionInstance:
    """One connected component of lesion voxels with its derived size statistics.

    ``type_id`` is 1..8 for the eight tumor types, or ``TYPE_IGNORED`` (0) for
    lesions excluded from training and scoring. ``voxels`` is an ``(n, 3)``
    integer array of grid indices.
    """

    id: int
    type_id: int
    voxels: np.ndarray
    volume_mm3: float = field(default=0.0)
    effective_radius_mm: float = field(default=0.0)
    confidence: float | None = None  # set on predicted instances only

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int32).reshape(-1, 3)
        if self.voxels.shape[0] == 0:
            raise ValueError("lesion instance must contain at least one voxel")

    @property
    def voxel_count(self) -> int:
        return int(self.voxels.shape[0])

    def sort_key(self) -> tuple[int, int, int]:
        """Deterministic ordering key: (min z, min y, min x)."""
        mins = self.voxels.min(axis=0)
        return (int(mins[2]), int(mins[1]), int(mins[0]))

    def mask(self, shape: tuple[int, int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]] = True
        return out

    def flat_indices(self, shape: tuple[int, int, int]) -> np.ndarray:
        return np.ravel_multi_index(
            (self.voxels[:, 0], self.voxels[:, 1], self.voxels[:, 2]), shape
        )

    def shifted(self, offset, new_id: int | None = None) -> "LesionInstance":
        """Copy with all voxel indices translated by ``offset``."""
        return LesionInstance(
            id=self.id if new_id is None else new_id,
            type_id=self.type_id,
            voxels=self.voxels + np.asarray(offset, dtype=np.int32),
            volume_mm3=self.volume_mm3,
            effective_radius_mm=self.effective_radius_mm,
            confidence=self.confidence,
        )


def make_instance(id: int, type_id: int, voxels: np.ndarray, spacing) -> LesionInstance:
    """Build a LesionInstance with volume and radius derived from the voxel set."""
    voxels = np.asarray(voxels, dtype=np.int32).reshape(-1, 3)
    vol = float(voxels.shape[0]) * float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    return LesionInstance(
        id=id,
        type_id=type_id,
        voxels=voxels,
        volume_mm3=vol,
        effective_radius_mm=effective_radius(vol),
    )


def effective_radius(volume_mm3: float) -> float:
    """Sphere-equivalent radius (3V / 4pi)^(1/3) in mm."""
    if volume_mm3 < 0:
        raise ValueError(f"volume must be non-negative, got {volume_mm3}")
    return (3.0 * volume_mm3 / (4.0 * math.pi)) ** (1.0 / 3.0)


_CONNECTIVITY_STRUCTS = {
    6: ndimage.generate_binary_structure(3, 1),
    18: ndimage.generate_binary_structure(3, 2),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask: Volume, connectivity: int = 26) -> list[LesionInstance]:
    """Extract maximal connected components of a binary volume as instances.

    Components are returned ordered by (min z, min y, min x) and labeled with
    ids 1..N. ``type_id`` is left at 0 (unset); callers that know the semantic
    label fill it in. An empty mask yields an empty list.
    """
    if connectivity not in _CONNECTIVITY_STRUCTS:
        raise ValueError(f"connectivity must be one of 6/18/26, got {connectivity}")
    arr = np.asarray(mask.data) != 0
    labeled, n = ndimage.label(arr, structure=_CONNECTIVITY_STRUCTS[connectivity])
    if n == 0:
        return []
    instances = []
    objects = ndimage.find_objects(labeled)
    for lab, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        sub = labeled[sl] == lab
        coords = np.argwhere(sub) + np.array([s.start for s in sl], dtype=np.int64)
        instances.append(make_instance(0, 0, coords, mask.spacing))
    instances.sort(key=lambda inst: inst.sort_key())
    for i, inst in enumerate(instances, start=1):
        inst.id = i
    return instances


def dice_overlap(a, b) -> float:
    """Dice coefficient 2|A&B| / (|A|+|B|) between two binary volumes.

    Both-empty masks score 1.0 by convention so that completely normal cases
    with an empty prediction count as perfect.
    """
    arr_a = a.data if isinstance(a, Volume) else np.asarray(a)
    arr_b = b.data if isinstance(b, Volume) else np.asarray(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"grid mismatch: {arr_a.shape} vs {arr_b.shape}")
    if isinstance(a, Volume) and isinstance(b, Volume) and not a.same_grid(b):
        raise ValueError("volumes are on different physical grids")
    arr_a = arr_a != 0
    arr_b = arr_b != 0
    na = int(arr_a.sum())
    nb = int(arr_b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(arr_a, arr_b).sum())
    return 2.0 * inter / (na + nb)


def region_bounding_box(region: Volume, margin_mm: float = 0.0) -> tuple[slice, slice, slice]:
    """Axis-aligned bounding box of a binary region dilated by ``margin_mm``.

    The margin is converted per axis via the spacing (ceil to whole voxels)
    and the box is clamped to the grid.
    """
    arr = np.asarray(region.data) != 0
    if not arr.any():
        raise EmptyRegionError("region is empty; nothing to crop to")
    slices = []
    for axis in range(3):
        proj = arr.any(axis=tuple(i for i in range(3) if i != axis))
        idx = np.nonzero(proj)[0]
        pad = int(math.ceil(margin_mm / region.spacing[axis])) if margin_mm > 0 else 0
        lo = max(int(idx[0]) - pad, 0)
        hi = min(int(idx[-1]) + pad, arr.shape[axis] - 1)
        slices.append(slice(lo, hi + 1))
    return tuple(slices)


def crop_to_region(v: Volume, region: Volume, margin_mm: float = 0.0) -> Volume:
    """Crop ``v`` to the bounding box of ``region`` plus a physical margin.

    The origin is updated so physical coordinates of the surviving voxels are
    preserved exactly.
    """
    box = region_bounding_box(region, margin_mm)
    return apply_crop(v, box)


def apply_crop(v: Volume, box: tuple[slice, slice, slice]) -> Volume:
    offset = np.array([s.start for s in box], dtype=float)
    new_origin = tuple(np.asarray(v.origin) + offset * np.asarray(v.spacing))
    return Volume(v.data[box], v.spacing, new_origin)


def resample(v: Volume, new_spacing, mode: str = "trilinear") -> Volume:
    """Resample a volume onto a grid with the requested spacing.

    The output grid has ``round(extent / new_spacing)`` voxels per axis (at
    least 1). Intensities are interpolated trilinearly, label volumes must use
    nearest-neighbor so the ignored label propagates as-is.
    """
    new_spacing = tuple(float(s) for s in new_spacing)
    if any(s <= 0 for s in new_spacing):
        raise ValueError(f"target spacing must be positive, got {new_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    old_shape = np.array(v.shape, dtype=float)
    old_spacing = np.array(v.spacing, dtype=float)
    tgt = np.array(new_spacing, dtype=float)
    new_shape = np.maximum(np.round(old_shape * old_spacing / tgt).astype(int), 1)
    if tuple(new_shape) == v.shape and np.allclose(old_spacing, tgt):
        return Volume(v.data.copy(), new_spacing, v.origin)
    grids = np.meshgrid(
        *[np.arange(n) * new_spacing[ax] / v.spacing[ax] for ax, n in enumerate(new_shape)],
        indexing="ij",
    )
    coords = np.stack(grids, axis=0)
    order = 1 if mode == "trilinear" else 0
    out = ndimage.map_coordinates(
        v.data.astype(np.float64 if order == 1 else v.data.dtype),
        coords,
        order=order,
        mode="nearest",
    )
    if order == 1 and np.issubdtype(v.data.dtype, np.floating):
        out = out.astype(v.data.dtype)
    return Volume(out, new_spacing, v.origin)
