"""Augmentation: identity, flip involution, scale volume bound, and label /
instance consistency after arbitrary transforms."""

import numpy as np

from planseg.augment import AugmentPolicy, augment
from planseg.labels import derive_patient_labels, instances_from_semantic
from planseg.volume import dice_overlap


def test_all_off_is_identity(tumor_case):
    out = augment(tumor_case, seed=5, policy=AugmentPolicy.all_off())
    assert out is tumor_case


def test_flip_is_involution(tumor_case):
    policy = AugmentPolicy(flip=True, flip_axes=(0,), flip_prob=1.0)
    once = augment(tumor_case, seed=1, policy=policy)
    twice = augment(once, seed=1, policy=policy)
    w = tumor_case.semantic.shape[0]
    # flipped voxel (i, j, k) lands at (W-1-i, j, k)
    orig = tumor_case.semantic.data
    assert np.array_equal(once.semantic.data, orig[::-1, :, :])
    for ph0, ph2 in zip(tumor_case.stack.phases, twice.stack.phases):
        assert np.array_equal(ph0.data, ph2.data)
    assert dice_overlap(twice.semantic.data > 6, orig > 6) == 1.0


def test_scale_changes_lesion_volume_cubically(tumor_case):
    policy = AugmentPolicy(scale=True, scale_range=(1.1, 1.1))
    out = augment(tumor_case, seed=3, policy=policy)
    orig = {i.type_id: i.voxel_count for i in tumor_case.instances}
    for inst in out.instances:
        before = orig.get(inst.type_id)
        if before is None or before < 100:
            continue
        ratio = inst.voxel_count / before
        assert abs(ratio - 1.1**3) < 0.15 * 1.1**3


def test_instances_rederived_after_elastic(tumor_case):
    policy = AugmentPolicy(elastic=True, elastic_magnitude_mm=2.0)
    out = augment(tumor_case, seed=9, policy=policy)
    re = instances_from_semantic(out.semantic)
    assert len(re) == len(out.instances)
    for a, b in zip(re, out.instances):
        assert a.type_id == b.type_id and np.array_equal(a.voxels, b.voxels)
    assert np.array_equal(out.patient_labels, derive_patient_labels(out.instances))


def test_crop_to_patch_shape(tumor_case):
    policy = AugmentPolicy(crop=True, crop_shape=(64, 64, 16), crop_fg_bias=1.0)
    out = augment(tumor_case, seed=2, policy=policy)
    assert out.semantic.shape == (64, 64, 16)
    assert all(ph.shape == (64, 64, 16) for ph in out.stack.phases)
    # foreground-biased crop keeps at least one lesion in view
    assert len(out.instances) >= 1


def test_crop_pads_small_inputs(tumor_case):
    policy = AugmentPolicy(crop=True, crop_shape=(128, 128, 48), crop_fg_bias=0.0)
    out = augment(tumor_case, seed=2, policy=policy)
    assert out.semantic.shape == (128, 128, 48)
    assert (out.semantic.data == 255).any()  # padding marked ignored


def test_brightness_touches_intensities_only(tumor_case):
    policy = AugmentPolicy(brightness=True, brightness_shift=10.0)
    out = augment(tumor_case, seed=4, policy=policy)
    assert np.array_equal(out.semantic.data, tumor_case.semantic.data)
    delta = out.stack.phases[0].data - tumor_case.stack.phases[0].data
    assert np.allclose(delta, delta.flat[0], atol=1e-5)
    assert abs(delta.flat[0]) > 1e-6


def test_same_seed_same_augmentation(tumor_case):
    policy = AugmentPolicy(scale=True, flip=True, elastic=True, brightness=True,
                           crop=True, crop_shape=(64, 64, 16))
    a = augment(tumor_case, seed=17, policy=policy)
    b = augment(tumor_case, seed=17, policy=policy)
    assert np.array_equal(a.semantic.data, b.semantic.data)
    for pa, pb in zip(a.stack.phases, b.stack.phases):
        assert np.array_equal(pa.data, pb.data)
