"""Loss terms: closed-form examples, counting oracles, and the weighted total."""

import math

import numpy as np
import pytest
import torch

from planseg.config import ObjectiveConfig
from planseg.labels import LABEL_IGNORED, NUM_SEMANTIC_CLASSES
from planseg.losses import (
    NonFiniteLossError,
    loss_consistency,
    loss_lesion,
    loss_patient,
    loss_pixel,
    total_loss,
)
from planseg.matching import MatchResult
from planseg.pointsample import PointSample, sample_points
from planseg.volume import make_instance

SHAPE = (16, 16, 8)
SPACING = (1.0, 1.0, 1.0)


def scalar_ce(logits, index):
    """Independent scalar cross-entropy oracle."""
    logits = np.asarray(logits, dtype=np.float64)
    return float(-logits[index] + math.log(np.exp(logits).sum()))


# -- pixel loss ----------------------------------------------------------------

def test_pixel_loss_perfect_prediction_near_zero():
    sem = torch.randint(0, NUM_SEMANTIC_CLASSES, (6, 6, 4), dtype=torch.uint8)
    logits = torch.full((NUM_SEMANTIC_CLASSES, 6, 6, 4), -20.0)
    logits.scatter_(0, sem.long().unsqueeze(0), 20.0)
    assert float(loss_pixel(logits, sem)) == pytest.approx(0.0, abs=1e-3)


def test_pixel_loss_uniform_logits_single_voxel():
    sem = torch.zeros((1, 1, 1), dtype=torch.uint8)
    logits = torch.zeros((NUM_SEMANTIC_CLASSES, 1, 1, 1))
    ce_part = math.log(NUM_SEMANTIC_CLASSES)
    got = float(loss_pixel(logits, sem))
    # CE = ln 15 plus the soft-Dice part for one voxel with uniform probs
    p = 1.0 / NUM_SEMANTIC_CLASSES
    dice_present = 1 - (2 * p + 1) / (p + 1 + 1)
    dice_absent = 1 - 1 / (p + 1)
    dice_part = (dice_present + (NUM_SEMANTIC_CLASSES - 1) * dice_absent) / NUM_SEMANTIC_CLASSES
    assert got == pytest.approx(ce_part + dice_part, abs=1e-5)


def test_pixel_loss_all_ignored_zero_loss_zero_grad():
    sem = torch.full((4, 4, 2), LABEL_IGNORED, dtype=torch.uint8)
    logits = torch.randn(NUM_SEMANTIC_CLASSES, 4, 4, 2, requires_grad=True)
    loss = loss_pixel(logits, sem)
    assert float(loss) == 0.0
    loss.backward()
    assert float(logits.grad.abs().sum()) == 0.0


def test_pixel_loss_ignored_voxels_excluded():
    sem = torch.zeros((2, 2, 1), dtype=torch.uint8)
    sem[0, 0, 0] = LABEL_IGNORED
    bad = torch.full((NUM_SEMANTIC_CLASSES, 2, 2, 1), -20.0)
    bad[0] = 20.0  # perfect on class 0 everywhere
    bad[:, 0, 0, 0] = 0.0  # garbage only at the ignored voxel
    assert float(loss_pixel(bad, sem)) == pytest.approx(0.0, abs=1e-3)


# -- lesion losses ---------------------------------------------------------------

def no_match(n_q):
    return MatchResult(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                       np.zeros((n_q, 0)))


def test_all_no_object_correct_gives_zero():
    class_logits = torch.full((4, 9), -20.0)
    class_logits[:, -1] = 20.0
    mask_logits = torch.randn(4, 4, 4, 8)
    pts = sample_points(mask_logits, [], SHAPE, 32, 3, seed=0)
    l_class, l_mask = loss_lesion(class_logits, mask_logits, no_match(4), pts, [], SHAPE)
    assert float(l_class) == pytest.approx(0.0, abs=1e-6)
    assert float(l_mask) == 0.0


def test_wrong_type_matches_scalar_ce_oracle():
    target = make_instance(1, 3, [[4, 4, 2]], SPACING)
    class_logits = torch.full((1, 9), -10.0)
    class_logits[0, 7] = 10.0  # confidently predicts type 8; truth is type 3
    mask_logits = torch.zeros(1, 4, 4, 8)
    match = MatchResult(np.array([0]), np.array([0]), np.zeros((1, 1)))
    pts = sample_points(mask_logits, [target], SHAPE, 32, 3, seed=0)
    l_class, _ = loss_lesion(class_logits, mask_logits, match, pts, [target], SHAPE)
    assert float(l_class) == pytest.approx(scalar_ce(class_logits[0].numpy(), 2), rel=1e-5)


def test_no_object_weight_reduces_unmatched_penalty():
    # one matched query (perfect), one unmatched query that wrongly predicts a type
    target = make_instance(1, 1, [[4, 4, 2]], SPACING)
    class_logits = torch.full((2, 9), -10.0)
    class_logits[0, 0] = 10.0  # matched, correct type
    class_logits[1, 4] = 10.0  # should be no-object but says type 5
    mask_logits = torch.zeros(2, 4, 4, 8)
    match = MatchResult(np.array([0]), np.array([0]), np.zeros((2, 1)))
    pts = sample_points(mask_logits, [target], SHAPE, 32, 3, seed=0)
    l_class, _ = loss_lesion(class_logits, mask_logits, match, pts, [target], SHAPE,
                             no_object_weight=0.1)
    ce_matched = scalar_ce(class_logits[0].numpy(), 0)
    ce_unmatched = scalar_ce(class_logits[1].numpy(), 8)
    expected = (1.0 * ce_matched + 0.1 * ce_unmatched) / (1.0 + 0.1)
    assert float(l_class) == pytest.approx(expected, rel=1e-5)


def test_mask_loss_counting_oracle():
    # prediction sigmoid ~= 1 at every point; target covers exactly half
    voxels = np.argwhere(np.ones((8, 16, 8), dtype=bool))  # x in [0, 8): half the grid
    target = make_instance(1, 1, voxels, SPACING)
    class_logits = torch.zeros(1, 9)
    mask_logits = torch.full((1, 4, 4, 8), 50.0)
    match = MatchResult(np.array([0]), np.array([0]), np.zeros((1, 1)))
    rng = np.random.default_rng(0)
    k = 2048
    coords = rng.uniform(0, 1, size=(k, 3)) * np.array(SHAPE)
    pts = PointSample(coords=coords, kind=np.zeros(k, dtype=np.uint8),
                      fes_target=np.full(k, -1, dtype=np.int64))
    _, l_mask = loss_lesion(class_logits, mask_logits, match, pts, [target], SHAPE)
    n_fg = int((np.floor(coords[:, 0]) < 8).sum())
    expected_dice = 1 - 2 * n_fg / (n_fg + k)
    expected_bce = 50.0 * (k - n_fg) / k  # saturated wrong on background points
    assert float(l_mask) == pytest.approx(expected_dice + expected_bce, rel=1e-3)


# -- patient loss -----------------------------------------------------------------

def test_patient_loss_saturated_correct():
    labels = np.array([1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0])
    logits = torch.tensor([20.0 if v else -20.0 for v in labels])
    assert float(loss_patient(logits, labels)) == pytest.approx(0.0, abs=1e-6)


def test_patient_loss_zero_logit_contributes_ln2():
    labels = np.zeros(11)
    logits = torch.zeros(11)
    assert float(loss_patient(logits, labels)) == pytest.approx(math.log(2), rel=1e-6)


def test_patient_loss_flipping_one_label_changes_one_term():
    rng = np.random.default_rng(0)
    logits = torch.tensor(rng.normal(size=11))
    labels = np.zeros(11)
    base = float(loss_patient(logits, labels))
    flipped = labels.copy()
    flipped[4] = 1
    delta = float(loss_patient(logits, flipped)) - base
    l = float(logits[4])
    per_term = (math.log(1 + math.exp(-l)) - math.log(1 + math.exp(l))) / 11
    assert delta == pytest.approx(per_term, rel=1e-6)


# -- consistency loss ----------------------------------------------------------------

def test_consistency_identity_is_zero():
    class_logits = torch.randn(5, 9)
    pooled = class_logits.softmax(dim=-1)[:, :8].max(dim=0).values
    patient_logits = torch.zeros(11)
    patient_logits[3:] = torch.logit(pooled)
    assert float(loss_consistency(class_logits, patient_logits)) == pytest.approx(0.0, abs=1e-9)


def test_consistency_opposite_probs_example():
    # pooled lesion probs ~[1,0,...]; patient probs ~[0,1,0,...]: sum of squares 2
    class_logits = torch.full((1, 9), -60.0)
    class_logits[0, 0] = 60.0
    patient_logits = torch.full((11,), -60.0)
    patient_logits[4] = 60.0  # fine-grained slot of type 2
    assert float(loss_consistency(class_logits, patient_logits)) == pytest.approx(2.0, abs=1e-5)


def test_consistency_dominated_query_changes_nothing():
    base = torch.tensor([[2.0, -1.0, 0.5, 0.0, 1.0, -2.0, 0.3, 0.1, -0.4]])
    # a query with nearly all mass on the no-object slot is elementwise
    # dominated on every class slot, so the max-pool ignores it
    dominated = torch.zeros(1, 9)
    dominated[0, -1] = 50.0
    patient_logits = torch.randn(11)
    assert float(loss_consistency(base, patient_logits)) == pytest.approx(
        float(loss_consistency(torch.cat([base, dominated]), patient_logits)), abs=1e-9
    )


def test_consistency_invariant_to_query_order():
    torch.manual_seed(3)
    class_logits = torch.randn(6, 9)
    patient_logits = torch.randn(11)
    perm = torch.randperm(6)
    assert float(loss_consistency(class_logits, patient_logits)) == pytest.approx(
        float(loss_consistency(class_logits[perm], patient_logits)), abs=1e-9
    )


# -- total ---------------------------------------------------------------------------

def unit_components():
    return {name: torch.tensor(1.0) for name in
            ("l_pixel", "l_lesion_class", "l_lesion_mask", "l_patient", "l_consist")}


def test_total_loss_paper_weights():
    total, breakdown = total_loss(unit_components(), ObjectiveConfig())
    assert float(total) == pytest.approx(2 + 2 + 5 + 1 + 0.1)
    assert breakdown.total == pytest.approx(10.1)


def test_total_loss_stage1_keeps_only_pixel_term():
    components = unit_components()
    components["l_pixel"] = torch.tensor(3.0)
    total, _ = total_loss(components, ObjectiveConfig(), stage1=True)
    assert float(total) == pytest.approx(6.0)


def test_total_loss_zero_components():
    comps = {k: torch.tensor(0.0) for k in unit_components()}
    total, breakdown = total_loss(comps, ObjectiveConfig())
    assert float(total) == 0.0 and breakdown.total == 0.0


def test_total_loss_names_non_finite_term():
    comps = unit_components()
    comps["l_lesion_mask"] = torch.tensor(float("nan"))
    with pytest.raises(NonFiniteLossError, match="l_lesion_mask"):
        total_loss(comps, ObjectiveConfig())


def test_all_losses_non_negative_random_sweep():
    rng = np.random.default_rng(1)
    for trial in range(10):
        torch.manual_seed(trial)
        sem = torch.randint(0, NUM_SEMANTIC_CLASSES, (6, 6, 4), dtype=torch.uint8)
        assert float(loss_pixel(torch.randn(NUM_SEMANTIC_CLASSES, 6, 6, 4), sem)) >= 0
        logits = torch.randn(3, 9)
        target = make_instance(1, int(rng.integers(1, 9)), [[2, 2, 1], [2, 3, 1]], SPACING)
        mask_logits = torch.randn(3, 4, 4, 8)
        match = MatchResult(np.array([0]), np.array([0]), np.zeros((3, 1)))
        pts = sample_points(mask_logits, [target], SHAPE, 64, 3, seed=trial)
        l_class, l_mask = loss_lesion(logits, mask_logits, match, pts, [target], SHAPE)
        assert float(l_class) >= 0 and float(l_mask) >= 0
        assert float(loss_patient(torch.randn(11), rng.integers(0, 2, 11))) >= 0
        assert float(loss_consistency(logits, torch.randn(11))) >= 0
