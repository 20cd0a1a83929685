"""Shared point sets for the point-sampled mask objective.

Points live in continuous full-resolution index space: voxel ``i`` covers
``[i, i+1)`` and has its center at ``i + 0.5``. The base set of K points mixes
importance sampling (most-uncertain mask logits, PointRend-style) with uniform
fill; on top of that, every target lesion contributes n guaranteed foreground
points so tiny lesions always reach the mask loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .model import MASK_STRIDE
from .volume import LesionInstance

KIND_IMPORTANCE = 0
KIND_UNIFORM = 1
KIND_FES = 2


class ForegroundSamplingViolation(AssertionError):
    """A matched target received fewer guaranteed foreground points than required."""


@dataclass
class PointSample:
    """A point set with per-point provenance.

    ``kind`` is one of KIND_IMPORTANCE / KIND_UNIFORM / KIND_FES;
    ``fes_target`` holds the index of the guaranteed-foreground target for FES
    points and -1 elsewhere.
    """

    coords: np.ndarray  # (P, 3) float64, continuous full-res index space
    kind: np.ndarray  # (P,) uint8
    fes_target: np.ndarray  # (P,) int64

    def __len__(self) -> int:
        return self.coords.shape[0]

    def fes_counts(self, n_targets: int) -> np.ndarray:
        counts = np.zeros(n_targets, dtype=np.int64)
        for t in self.fes_target[self.fes_target >= 0]:
            counts[t] += 1
        return counts


def sample_mask_logits(mask_logits: torch.Tensor, coords: np.ndarray) -> torch.Tensor:
    """Trilinear sampling of per-query mask logits at continuous points.

    ``mask_logits`` is (Nq, gx, gy, gz) on the stride-(4, 4, 1) grid; ``coords``
    are (P, 3) in full-resolution space. Returns (Nq, P), differentiable in the
    logits. Border cells are clamped (nearest extrapolation).
    """
    device = mask_logits.device
    dtype = mask_logits.dtype
    grid_shape = mask_logits.shape[-3:]
    # copy: never mutate the caller's coordinate array
    u = torch.as_tensor(np.array(coords, dtype=np.float64)).to(dtype=dtype, device=device)
    for axis in range(3):
        u[:, axis] = u[:, axis] / MASK_STRIDE[axis] - 0.5
    lo = torch.floor(u)
    w = u - lo
    vals = None
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = torch.clamp(lo[:, 0].long() + dx, 0, grid_shape[0] - 1)
                iy = torch.clamp(lo[:, 1].long() + dy, 0, grid_shape[1] - 1)
                iz = torch.clamp(lo[:, 2].long() + dz, 0, grid_shape[2] - 1)
                wx = w[:, 0] if dx else 1 - w[:, 0]
                wy = w[:, 1] if dy else 1 - w[:, 1]
                wz = w[:, 2] if dz else 1 - w[:, 2]
                term = mask_logits[:, ix, iy, iz] * (wx * wy * wz).unsqueeze(0)
                vals = term if vals is None else vals + term
    return vals


def nearest_voxels(coords: np.ndarray, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.floor(coords).astype(np.int64)
    return tuple(np.clip(idx[:, a], 0, shape[a] - 1) for a in range(3))


def sample_target_masks(
    targets: list[LesionInstance], coords: np.ndarray, shape
) -> np.ndarray:
    """Nearest-neighbor binary values of each target mask at the points: (Nt, P)."""
    ix, iy, iz = nearest_voxels(coords, shape)
    out = np.zeros((len(targets), coords.shape[0]), dtype=np.float64)
    for t, inst in enumerate(targets):
        mask = inst.mask(shape)
        out[t] = mask[ix, iy, iz]
    return out


def sample_points(
    mask_logits: torch.Tensor | None,
    targets: list[LesionInstance],
    shape,
    k: int,
    n_fg: int,
    seed: int,
    oversample: int = 3,
    beta: float = 0.75,
) -> PointSample:
    """Draw the shared point set: K importance/uniform points plus n per target.

    Importance sampling draws ``oversample * K`` uniform candidates, keeps the
    ``beta`` fraction of K with the smallest |logit| over the given queries
    (the most uncertain anywhere), and fills the rest with fresh uniform
    points. Per-target foreground points are drawn from each target's voxels,
    with replacement when a lesion has fewer than ``n_fg`` voxels, so the
    guarantee is unconditional. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    dims = np.array(shape, dtype=np.float64)
    n_q = 0 if mask_logits is None else mask_logits.shape[0]
    if n_q == 0 or beta <= 0:
        base = rng.uniform(0, 1, size=(k, 3)) * dims
        kind = np.full(k, KIND_UNIFORM, dtype=np.uint8)
    else:
        n_imp = int(round(beta * k))
        cand = rng.uniform(0, 1, size=(max(oversample, 1) * k, 3)) * dims
        with torch.no_grad():
            logits = sample_mask_logits(mask_logits, cand)
            uncertainty = -logits.abs().min(dim=0).values
        order = torch.argsort(uncertainty, descending=True, stable=True).cpu().numpy()
        keep = order[:n_imp]
        fill = rng.uniform(0, 1, size=(k - n_imp, 3)) * dims
        base = np.concatenate([cand[keep], fill], axis=0)
        kind = np.concatenate(
            [
                np.full(n_imp, KIND_IMPORTANCE, dtype=np.uint8),
                np.full(k - n_imp, KIND_UNIFORM, dtype=np.uint8),
            ]
        )
    fes_target = np.full(len(base), -1, dtype=np.int64)
    coords = [base]
    kinds = [kind]
    fes = [fes_target]
    if n_fg > 0:
        for t, inst in enumerate(targets):
            replace = inst.voxel_count < n_fg
            picks = rng.choice(inst.voxel_count, size=n_fg, replace=replace)
            pts = inst.voxels[picks].astype(np.float64) + 0.5
            coords.append(pts)
            kinds.append(np.full(n_fg, KIND_FES, dtype=np.uint8))
            fes.append(np.full(n_fg, t, dtype=np.int64))
    return PointSample(
        coords=np.concatenate(coords, axis=0),
        kind=np.concatenate(kinds, axis=0),
        fes_target=np.concatenate(fes, axis=0),
    )


def verify_foreground_guarantee(
    points: PointSample,
    targets: list[LesionInstance],
    shape,
    n_fg: int,
) -> int:
    """Assert every target owns >= n_fg foreground-provenance points that are
    actually inside its mask. Returns the number of targets checked."""
    if n_fg == 0 or not targets:
        return 0
    ix, iy, iz = nearest_voxels(points.coords, shape)
    for t, inst in enumerate(targets):
        sel = points.fes_target == t
        if sel.sum() < n_fg:
            raise ForegroundSamplingViolation(
                f"target {t} has {int(sel.sum())} guaranteed foreground points, need {n_fg}"
            )
        mask = inst.mask(shape)
        if not mask[ix[sel], iy[sel], iz[sel]].all():
            raise ForegroundSamplingViolation(
                f"target {t} has a guaranteed point outside its own mask"
            )
    return len(targets)
