"""Evaluation metrics: matcher boundary cases, counting rules, size bins,
AUC two-oracle agreement, and patient-level aggregation."""

import numpy as np
import pytest

from planseg.labels import tumor_label
from planseg.metrics import (
    PatientCase,
    dice_per_case,
    lesion_metrics,
    match_lesions,
    patient_metrics,
    rank_auc,
    roc_points,
    size_bin,
    trapezoid_auc,
)
from planseg.volume import Volume, make_instance

SHAPE = (24, 24, 12)
SPACING = (1.0, 1.0, 1.0)


def box_instance(id, type_id, start, size, spacing=SPACING):
    start = np.asarray(start)
    voxels = start + np.argwhere(np.ones(size, dtype=bool))
    return make_instance(id, type_id, voxels, spacing)


def big(id, type_id, start, size=(6, 6, 6)):
    # 216 voxels -> effective radius ~3.7 mm at unit spacing (above the filter)
    return box_instance(id, type_id, start, size)


# -- match_lesions -----------------------------------------------------------

def test_identical_sets_all_tp():
    gt = [big(1, 2, (2, 2, 2)), big(2, 5, (14, 14, 4))]
    pred = [big(1, 2, (2, 2, 2)), big(2, 5, (14, 14, 4))]
    table = match_lesions(gt, pred, SHAPE)
    assert table.n_tp == 2 and not table.fp_pred and not table.fn_gt
    assert all(d == 1.0 for _, _, d in table.matches)


def shifted_prediction(shift_x):
    gt = big(1, 1, (4, 4, 2))
    pred = big(1, 1, (4 + shift_x, 4, 2))
    inter = max(0, 6 - abs(shift_x)) * 36
    dice = 2 * inter / (216 + 216)
    return gt, pred, dice


def test_dice_threshold_boundary():
    gt, pred, dice = shifted_prediction(4)  # dice = 2*72/432 = 1/3 > 0.2 -> TP
    table = match_lesions([gt], [pred], SHAPE)
    assert dice == pytest.approx(1 / 3)
    assert table.n_tp == 1

    gt, pred, dice = shifted_prediction(5)  # dice = 2*36/432 = 1/6 < 0.2 -> FP + FN
    table = match_lesions([gt], [pred], SHAPE)
    assert dice == pytest.approx(1 / 6)
    assert table.n_tp == 0 and len(table.fp_pred) == 1 and len(table.fn_gt) == 1


def test_exact_02_is_not_a_match():
    # Dice exactly 0.2 must NOT match (criterion is strictly greater)
    gt = box_instance(1, 1, (0, 0, 0), (10, 6, 6))  # 360
    pred = box_instance(1, 1, (8, 0, 0), (2, 6, 6))  # 72; inter 72
    dice = 2 * 72 / (360 + 72)
    table = match_lesions([gt], [pred], SHAPE, dice_threshold=dice)
    assert table.n_tp == 0


def test_fragmentation_one_tp_one_fp():
    gt = box_instance(1, 1, (4, 4, 2), (12, 6, 6))
    frag_a = box_instance(1, 1, (4, 4, 2), (6, 6, 6))
    frag_b = box_instance(2, 1, (10, 4, 2), (6, 6, 6))
    table = match_lesions([gt], [frag_a, frag_b], SHAPE)
    assert table.n_tp == 1
    assert len(table.fp_pred) == 1


def test_greedy_resolves_double_overlap_to_best():
    gt = box_instance(1, 1, (4, 4, 2), (8, 6, 6))
    strong = box_instance(1, 1, (4, 4, 2), (6, 6, 6))  # higher dice
    weak = box_instance(2, 1, (9, 4, 2), (6, 6, 6))
    table = match_lesions([gt], [strong, weak], SHAPE)
    assert table.n_tp == 1
    assert table.matches[0][1] == 0  # the stronger prediction wins
    assert table.fp_pred == [1]


def test_small_gt_filtered_and_overlap_ignored():
    tiny = box_instance(1, 1, (2, 2, 2), (2, 2, 2))  # radius ~1.24 mm: filtered out
    pred = box_instance(1, 1, (2, 2, 2), (2, 2, 2))
    table = match_lesions([tiny], [pred], SHAPE)
    assert table.n_tp == 0
    assert table.ignored_pred == [0] and not table.fp_pred and not table.fn_gt


def test_ignored_type_gt_excluded():
    unknown = big(1, 0, (4, 4, 2))  # type 0: annotated but unclassifiable
    pred = big(1, 3, (4, 4, 2))
    table = match_lesions([unknown], [pred], SHAPE)
    assert table.n_tp == 0 and table.ignored_pred == [0] and not table.fn_gt


def test_removing_ignored_overlap_prediction_changes_nothing():
    gt = [big(1, 0, (2, 2, 2)), big(2, 4, (14, 14, 4))]
    hit = big(1, 4, (14, 14, 4))
    ignored_hit = big(2, 1, (2, 2, 2))
    with_pred = match_lesions(gt, [hit, ignored_hit], SHAPE)
    without = match_lesions(gt, [hit], SHAPE)
    for a, b in ((with_pred, without),):
        assert a.n_tp == b.n_tp == 1
        assert len(a.fp_pred) == len(b.fp_pred) == 0
    m_with = lesion_metrics([with_pred])
    m_without = lesion_metrics([without])
    assert m_with.precision == m_without.precision
    assert m_with.recall == m_without.recall


def test_swap_symmetry_precision_recall():
    rng = np.random.default_rng(0)
    for _ in range(20):
        gt, pred = [], []
        for i in range(int(rng.integers(1, 4))):
            gt.append(big(i + 1, int(rng.integers(1, 9)),
                          (int(rng.integers(0, 16)), int(rng.integers(0, 16)),
                           int(rng.integers(0, 5)))))
        for j in range(int(rng.integers(1, 4))):
            pred.append(big(j + 1, int(rng.integers(1, 9)),
                            (int(rng.integers(0, 16)), int(rng.integers(0, 16)),
                             int(rng.integers(0, 5)))))
        fwd = lesion_metrics([match_lesions(gt, pred, SHAPE)])
        rev = lesion_metrics([match_lesions(pred, gt, SHAPE)])
        assert fwd.n_tp == rev.n_tp
        assert fwd.precision == rev.recall and fwd.recall == rev.precision


# -- lesion_metrics ------------------------------------------------------------

def test_counting_example_10_gt_8_tp_2_fp():
    tables = []
    for i in range(10):
        gt = big(1, 1, (4, 4, 2))
        if i < 8:
            tables.append(match_lesions([gt], [big(1, 1, (4, 4, 2))], SHAPE))
        else:
            tables.append(match_lesions([gt], [big(1, 1, (14, 14, 4))], SHAPE))
    m = lesion_metrics(tables)
    assert m.recall == pytest.approx(0.8)
    assert m.precision == pytest.approx(8 / 10)


def test_size_bins_lower_inclusive_and_absent():
    assert size_bin(4.99) == "r_lt_5"
    assert size_bin(5.0) == "r_5_10"
    assert size_bin(10.0) == "r_10_20"
    assert size_bin(20.0) == "r_gt_20"
    # gt radii {4, 7, 25} all detected: bins {1, 1, absent, 1}
    def sized(id, radius):
        side = int(round((4 / 3 * np.pi) ** (1 / 3) * radius / 1.0))
        return box_instance(id, 1, (0, 0, 0), (side, side, side))

    tables = []
    for r in (4.0, 7.0, 25.0):
        g = sized(1, r)
        tables.append(match_lesions([g], [sized(1, r)], (64, 64, 64)))
    m = lesion_metrics(tables)
    assert m.recall_by_bin["r_lt_5"] == 1.0
    assert m.recall_by_bin["r_5_10"] == 1.0
    assert m.recall_by_bin["r_10_20"] is None
    assert m.recall_by_bin["r_gt_20"] == 1.0


def test_confusion_matrix_over_tp_only():
    t1 = match_lesions([big(1, 2, (2, 2, 2))], [big(1, 2, (2, 2, 2))], SHAPE)
    t2 = match_lesions([big(1, 3, (2, 2, 2))], [big(1, 7, (2, 2, 2))], SHAPE)
    t3 = match_lesions([big(1, 1, (2, 2, 2))], [], SHAPE)  # FN: not in the matrix
    m = lesion_metrics([t1, t2, t3])
    assert m.confusion.sum() == m.n_tp == 2
    assert m.confusion[1, 1] == 1  # type 2 correct
    assert m.confusion[2, 6] == 1  # type 3 predicted as type 7
    assert m.accuracy == pytest.approx(0.5)
    assert m.confusion[0].sum() == 0  # the missed type-1 lesion is absent


def test_accuracy_absent_when_no_matches():
    t = match_lesions([big(1, 1, (2, 2, 2))], [], SHAPE)
    m = lesion_metrics([t])
    assert m.accuracy is None
    assert m.recall == 0.0


# -- dice_per_case ----------------------------------------------------------------

def semantic_with_tumor(mask_voxels, type_id=1):
    sem = np.zeros(SHAPE, dtype=np.uint8)
    sem[0:8, 0:8, 0:4] = 1  # liver
    for v in mask_voxels:
        sem[tuple(v)] = tumor_label(type_id)
    return Volume(sem, SPACING)


def test_dice_per_case_both_empty_is_one():
    sem = semantic_with_tumor([])
    assert dice_per_case(sem, np.zeros(SHAPE, dtype=bool)) == 1.0


def test_dice_per_case_type_agnostic():
    voxels = [(1, 1, 1), (1, 2, 1), (2, 1, 1), (2, 2, 1)]
    sem = semantic_with_tumor(voxels, type_id=3)
    pred = np.zeros(SHAPE, dtype=bool)
    for v in voxels:
        pred[v] = True  # perfect mask, wrong type elsewhere is irrelevant
    assert dice_per_case(sem, pred) == 1.0


def test_dice_per_case_half_overlap():
    sem = semantic_with_tumor([(1, 1, 1), (1, 2, 1)])
    pred = np.zeros(SHAPE, dtype=bool)
    pred[1, 1, 1] = True
    pred[5, 5, 2] = True
    assert dice_per_case(sem, pred) == pytest.approx(0.5)


def test_dice_per_case_excludes_ignored_voxels():
    sem = semantic_with_tumor([(1, 1, 1)])
    sem.data[3, 3, 3] = 255
    pred = np.zeros(SHAPE, dtype=bool)
    pred[1, 1, 1] = True
    pred[3, 3, 3] = True  # prediction inside the ignored region is free
    assert dice_per_case(sem, pred) == 1.0


# -- AUC / ROC --------------------------------------------------------------------

def test_auc_examples():
    assert rank_auc([0.9, 0.8, 0.3, 0.7], [1, 1, 0, 0]) == 1.0
    assert rank_auc([0.6, 0.9, 0.7, 0.2], [1, 1, 0, 0]) == pytest.approx(0.75)
    assert rank_auc([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0]) == pytest.approx(0.5)
    assert rank_auc([0.4, 0.6], [1, 1]) is None  # no negatives


def test_rank_auc_equals_trapezoid_on_random_sets():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        a = rank_auc(scores, labels)
        b = trapezoid_auc(roc_points(scores, labels))
        assert abs(a - b) < 1e-9


def test_roc_points_monotone():
    rng = np.random.default_rng(4)
    scores = rng.random(30)
    labels = rng.integers(0, 2, 30)
    labels[0], labels[1] = 0, 1
    pts = roc_points(scores, labels)
    fprs = [p[1] for p in pts]
    tprs = [p[2] for p in pts]
    assert all(b >= a for a, b in zip(fprs, fprs[1:]))
    assert all(b >= a for a, b in zip(tprs, tprs[1:]))
    assert pts[0][1:] == (0.0, 0.0) and pts[-1][1:] == (1.0, 1.0)


# -- patient metrics -----------------------------------------------------------------

def pcase(cid, cohort, any_score, labels):
    scores = np.zeros(11)
    scores[0] = any_score
    return PatientCase(cid, cohort, scores, np.asarray(labels))


def test_patient_sensitivity_and_cohort_specificity():
    tumor_labels = [1] + [0] * 10
    none = [0] * 11
    cases = [
        pcase("t1", "tumor", 0.9, tumor_labels),
        pcase("t2", "tumor", 0.2, tumor_labels),
        pcase("n1", "normal", 0.1, none),
        pcase("n2", "normal", 0.8, none),
        pcase("h1", "hard_normal", 0.4, none),
    ]
    m = patient_metrics(cases, threshold=0.5)
    assert m.sensitivity == pytest.approx(0.5)
    assert m.specificity_normal == pytest.approx(0.5)
    assert m.specificity_hard == pytest.approx(1.0)
    assert m.n_tumor == 2 and m.n_normal == 2 and m.n_hard == 1


def test_others_only_cases_excluded_from_benign_malignant_auc():
    others_only = np.zeros(11, dtype=int)
    others_only[0] = 1
    others_only[10] = 1
    malignant = np.zeros(11, dtype=int)
    malignant[[0, 2, 3]] = 1
    none = np.zeros(11, dtype=int)

    def case(cid, cohort, labels, mal_score):
        scores = np.zeros(11)
        scores[0] = labels[0]
        scores[2] = mal_score
        return PatientCase(cid, cohort, scores, labels)

    cases = [
        case("m", "tumor", malignant, 0.9),
        case("n", "normal", none, 0.1),
        # a perfectly-scored negative, except it is others-only and excluded;
        # keeping it would change nothing, but a high malignant score would
        case("o", "tumor", others_only, 1.0),
    ]
    m = patient_metrics(cases)
    assert m.auc["any_malignant"] == 1.0  # the others-only case did not poison it
    sub = patient_metrics(cases[:2])
    assert m.auc["any_malignant"] == sub.auc["any_malignant"]


def test_degenerate_label_auc_absent():
    none = np.zeros(11, dtype=int)
    cases = [pcase("a", "normal", 0.2, none), pcase("b", "normal", 0.3, none)]
    m = patient_metrics(cases)
    assert m.auc["any_tumor"] is None
    assert m.sensitivity is None
