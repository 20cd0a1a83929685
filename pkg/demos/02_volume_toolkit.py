"""Tour of the grid primitives: connected components, Dice, effective radius,
physical cropping, and resampling.

Run:  python demos/02_volume_toolkit.py
"""

import numpy as np

from planseg.volume import (
    Volume,
    connected_components,
    crop_to_region,
    dice_overlap,
    effective_radius,
    resample,
)

spacing = (0.7, 0.7, 5.0)

# two blobs, one of them only diagonally connected to a third voxel
mask = np.zeros((32, 32, 8), dtype=bool)
mask[4:9, 4:9, 2:4] = True
mask[20:24, 20:24, 5] = True
mask[24, 24, 6] = True  # touches the corner of the second blob
vol = Volume(mask, spacing)

for conn in (6, 26):
    comps = connected_components(vol, connectivity=conn)
    sizes = [c.voxel_count for c in comps]
    print(f"connectivity {conn}: {len(comps)} components, sizes {sizes}")

comps = connected_components(vol, connectivity=26)
for c in comps:
    print(
        f"  component {c.id}: {c.voxel_count} voxels, {c.volume_mm3:.0f} mm^3, "
        f"effective radius {c.effective_radius_mm:.2f} mm"
    )

print(f"\nunit sphere volume -> radius {effective_radius(4 / 3 * np.pi):.3f} mm")

shifted = np.roll(mask, 2, axis=0)
print(f"dice(original, shifted-by-2) = {dice_overlap(mask, shifted):.3f}")
print(f"dice(empty, empty) = {dice_overlap(np.zeros_like(mask), np.zeros_like(mask))}")

region = Volume(mask, spacing)
intensities = Volume(np.random.default_rng(0).normal(100, 10, mask.shape).astype(np.float32),
                     spacing)
crop = crop_to_region(intensities, region, margin_mm=5.0)
print(f"\ncrop: {intensities.shape} -> {crop.shape}, origin {crop.origin}")

iso = resample(crop, (2.0, 2.0, 2.0), mode="trilinear")
print(f"resampled to 2 mm isotropic: {crop.shape} -> {iso.shape}")
labels = resample(Volume(mask.astype(np.uint8), spacing), (2.0, 2.0, 2.0), mode="nearest")
print(f"label volume resampled with nearest neighbor: values {sorted(np.unique(labels.data))}")
