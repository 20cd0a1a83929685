"""Three-level evaluation: per-case Dice, lesion detection/classification at
the >0.2 Dice overlap criterion with size stratification, and patient-level
screening/diagnosis metrics with rank-statistic AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import (
    LABEL_IGNORED,
    NUM_TUMOR_TYPES,
    PATIENT_LABEL_NAMES,
    TYPE_IGNORED,
    tumor_mask,
)
from .volume import LesionInstance, Volume

SIZE_BIN_NAMES = ("r_lt_5", "r_5_10", "r_10_20", "r_gt_20")


def size_bin(radius_mm: float, bins=(5.0, 10.0, 20.0)) -> str:
    """Size bin of a lesion radius; boundaries are lower-inclusive."""
    if radius_mm < bins[0]:
        return SIZE_BIN_NAMES[0]
    if radius_mm < bins[1]:
        return SIZE_BIN_NAMES[1]
    if radius_mm < bins[2]:
        return SIZE_BIN_NAMES[2]
    return SIZE_BIN_NAMES[3]


@dataclass
class LesionMatchTable:
    """One case's one-to-one greedy matching between GT and predicted lesions.

    ``matches`` holds (gt_index, pred_index, dice) into the *active* GT list
    (radius >= min filter applied, ignored types removed) and the prediction
    list. Predictions overlapping only ignored GT count toward neither TP nor
    FP.
    """

    gt: list[LesionInstance]
    pred: list[LesionInstance]
    matches: list[tuple[int, int, float]]
    fn_gt: list[int]
    fp_pred: list[int]
    ignored_pred: list[int]

    @property
    def n_tp(self) -> int:
        return len(self.matches)


def _pairwise_dice(a: list[LesionInstance], b: list[LesionInstance], shape) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    flat_a = [inst.flat_indices(shape) for inst in a]
    flat_b = [inst.flat_indices(shape) for inst in b]
    for i, fa in enumerate(flat_a):
        sa = np.sort(fa)
        for j, fb in enumerate(flat_b):
            inter = np.intersect1d(sa, fb, assume_unique=True).size
            if inter:
                out[i, j] = 2.0 * inter / (fa.size + fb.size)
    return out


def match_lesions(
    gt: list[LesionInstance],
    pred: list[LesionInstance],
    shape,
    dice_threshold: float = 0.2,
    min_radius_mm: float = 3.0,
) -> LesionMatchTable:
    """Greedy descending-Dice matching; pairs require Dice > threshold.

    GT lesions below the radius filter or of ignored type are excluded from
    matching; predictions whose only above-threshold overlap is with such an
    excluded lesion are marked ignored.
    """
    keep = [
        g.type_id != TYPE_IGNORED and g.effective_radius_mm >= min_radius_mm for g in gt
    ]
    active = [g for g, k in zip(gt, keep) if k]
    excluded = [g for g, k in zip(gt, keep) if not k]
    dice = _pairwise_dice(active, pred, shape)
    candidates = [
        (dice[i, j], i, j)
        for i in range(len(active))
        for j in range(len(pred))
        if dice[i, j] > dice_threshold
    ]
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    matches = []
    for d, i, j in candidates:
        if i in used_gt or j in used_pred:
            continue
        matches.append((i, j, float(d)))
        used_gt.add(i)
        used_pred.add(j)
    fn_gt = [i for i in range(len(active)) if i not in used_gt]
    leftover = [j for j in range(len(pred)) if j not in used_pred]
    ignored_pred = []
    fp_pred = []
    if leftover and excluded:
        dice_exc = _pairwise_dice(excluded, [pred[j] for j in leftover], shape)
        for col, j in enumerate(leftover):
            if (dice_exc[:, col] > dice_threshold).any():
                ignored_pred.append(j)
            else:
                fp_pred.append(j)
    else:
        fp_pred = leftover
    return LesionMatchTable(
        gt=active, pred=pred, matches=matches, fn_gt=fn_gt,
        fp_pred=fp_pred, ignored_pred=ignored_pred,
    )


@dataclass
class LesionMetrics:
    precision: float | None
    recall: float | None
    recall_by_bin: dict[str, float | None]
    accuracy: float | None
    confusion: np.ndarray  # (C, C), rows = true type, cols = predicted type
    n_tp: int
    n_fp: int
    n_fn: int
    n_ignored_pred: int


def lesion_metrics(tables: list[LesionMatchTable], bins=(5.0, 10.0, 20.0)) -> LesionMetrics:
    """Aggregate detection and classification metrics over per-case tables.

    Detection is type-agnostic; classification accuracy and the confusion
    matrix consider only true-positive pairs. Size-bin recalls bin ground
    truth lesions by effective radius; empty bins report as absent (None).
    """
    n_tp = sum(t.n_tp for t in tables)
    n_fp = sum(len(t.fp_pred) for t in tables)
    n_fn = sum(len(t.fn_gt) for t in tables)
    n_ignored = sum(len(t.ignored_pred) for t in tables)
    precision = n_tp / (n_tp + n_fp) if (n_tp + n_fp) else None
    recall = n_tp / (n_tp + n_fn) if (n_tp + n_fn) else None
    bin_total = {name: 0 for name in SIZE_BIN_NAMES}
    bin_hit = {name: 0 for name in SIZE_BIN_NAMES}
    confusion = np.zeros((NUM_TUMOR_TYPES, NUM_TUMOR_TYPES), dtype=np.int64)
    correct = 0
    for table in tables:
        matched_gt = {i for i, _, _ in table.matches}
        for i, g in enumerate(table.gt):
            name = size_bin(g.effective_radius_mm, bins)
            bin_total[name] += 1
            if i in matched_gt:
                bin_hit[name] += 1
        for i, j, _ in table.matches:
            true_t = table.gt[i].type_id
            pred_t = table.pred[j].type_id
            confusion[true_t - 1, pred_t - 1] += 1
            if true_t == pred_t:
                correct += 1
    recall_by_bin = {
        name: (bin_hit[name] / bin_total[name] if bin_total[name] else None)
        for name in SIZE_BIN_NAMES
    }
    accuracy = correct / n_tp if n_tp else None
    return LesionMetrics(
        precision=precision,
        recall=recall,
        recall_by_bin=recall_by_bin,
        accuracy=accuracy,
        confusion=confusion,
        n_tp=n_tp,
        n_fp=n_fp,
        n_fn=n_fn,
        n_ignored_pred=n_ignored,
    )


def dice_per_case(gt_semantic: Volume, pred_tumor: np.ndarray) -> float:
    """Type-agnostic binary tumor Dice for one case (both-empty scores 1.0).

    Voxels carrying the ignored label are excluded from both masks.
    """
    sem = np.asarray(gt_semantic.data)
    valid = sem != LABEL_IGNORED
    gt_bin = tumor_mask(sem) & valid
    pred_bin = np.asarray(pred_tumor, dtype=bool) & valid
    na, nb = int(gt_bin.sum()), int(pred_bin.sum())
    if na + nb == 0:
        return 1.0
    inter = int((gt_bin & pred_bin).sum())
    return 2.0 * inter / (na + nb)


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """AUC as the rank statistic: P(random positive outscores random negative),
    ties counting one half. Absent (None) when either class is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    if pos.size == 0 or neg.size == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def roc_points(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float, float]]:
    """ROC (threshold, fpr, tpr) points from high to low threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    points = [(float("inf"), 0.0, 0.0)]
    if n_pos == 0 or n_neg == 0:
        return points
    order = np.argsort(-scores, kind="stable")
    tp = fp = 0
    prev = None
    for idx in order:
        s = scores[idx]
        if prev is not None and s != prev:
            points.append((float(prev), fp / n_neg, tp / n_pos))
        if labels[idx]:
            tp += 1
        else:
            fp += 1
        prev = s
    points.append((float(prev), fp / n_neg, tp / n_pos))
    return points


def trapezoid_auc(points: list[tuple[float, float, float]]) -> float | None:
    """Area under the ROC polyline (independent cross-check of rank_auc)."""
    if len(points) < 2:
        return None
    area = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


@dataclass
class PatientCase:
    case_id: str
    cohort: str
    scores: np.ndarray  # (11,)
    labels: np.ndarray  # (11,) ground truth


@dataclass
class PatientMetrics:
    sensitivity: float | None
    specificity_normal: float | None
    specificity_hard: float | None
    auc: dict[str, float | None]
    roc: dict[str, list[tuple[float, float, float]]]
    n_tumor: int
    n_normal: int
    n_hard: int


def _others_only(labels: np.ndarray) -> bool:
    # tumor present but neither the benign nor the malignant flag: only "others"
    return bool(labels[0] == 1 and labels[1] == 0 and labels[2] == 0)


def patient_metrics(cases: list[PatientCase], threshold: float = 0.5) -> PatientMetrics:
    """Screening sensitivity/specificity at the threshold plus per-label AUC.

    Specificity is reported separately for the completely-normal and the hard
    non-tumor cohorts. Cases whose only lesions are of type "others" are
    excluded from the benign/malignant AUCs. Labels with a single class
    present report their AUC as absent.
    """
    any_scores = np.array([c.scores[0] for c in cases])
    any_labels = np.array([c.labels[0] for c in cases])
    pos = any_labels == 1
    sens = (
        float((any_scores[pos] >= threshold).mean()) if pos.any() else None
    )

    def cohort_spec(name: str) -> tuple[float | None, int]:
        sel = [i for i, c in enumerate(cases) if c.cohort == name]
        if not sel:
            return None, 0
        neg_scores = any_scores[sel]
        return float((neg_scores < threshold).mean()), len(sel)

    spec_normal, n_normal = cohort_spec("normal")
    spec_hard, n_hard = cohort_spec("hard_normal")

    auc: dict[str, float | None] = {}
    roc: dict[str, list] = {}
    for li, name in enumerate(PATIENT_LABEL_NAMES):
        subset = cases
        if name in ("any_benign", "any_malignant"):
            subset = [c for c in cases if not _others_only(c.labels)]
        scores = np.array([c.scores[li] for c in subset])
        labels = np.array([c.labels[li] for c in subset])
        auc[name] = rank_auc(scores, labels)
        roc[name] = roc_points(scores, labels)
    return PatientMetrics(
        sensitivity=sens,
        specificity_normal=spec_normal,
        specificity_hard=spec_hard,
        auc=auc,
        roc=roc,
        n_tumor=int(pos.sum()),
        n_normal=n_normal,
        n_hard=n_hard,
    )


@dataclass
class EvalReport:
    """The full three-level metric bundle for one evaluated run."""

    tag: str
    n_cases: int
    case_ids: list[str]
    dice_cases: list[float]
    dice_mean: float | None
    lesion: LesionMetrics
    patient: PatientMetrics
    type_auc_mean: float | None = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "tag": self.tag,
            "n_cases": self.n_cases,
            "case_ids": self.case_ids,
            "dice_cases": self.dice_cases,
            "dice_mean": self.dice_mean,
            "lesion": {
                "precision": self.lesion.precision,
                "recall": self.lesion.recall,
                "recall_by_bin": self.lesion.recall_by_bin,
                "accuracy": self.lesion.accuracy,
                "confusion": self.lesion.confusion.tolist(),
                "n_tp": self.lesion.n_tp,
                "n_fp": self.lesion.n_fp,
                "n_fn": self.lesion.n_fn,
                "n_ignored_pred": self.lesion.n_ignored_pred,
            },
            "patient": {
                "sensitivity": self.patient.sensitivity,
                "specificity_normal": self.patient.specificity_normal,
                "specificity_hard": self.patient.specificity_hard,
                "auc": self.patient.auc,
                "roc": {k: [list(p) for p in v] for k, v in self.patient.roc.items()},
                "n_tumor": self.patient.n_tumor,
                "n_normal": self.patient.n_normal,
                "n_hard": self.patient.n_hard,
            },
            "type_auc_mean": self.type_auc_mean,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        lesion = LesionMetrics(
            precision=d["lesion"]["precision"],
            recall=d["lesion"]["recall"],
            recall_by_bin=d["lesion"]["recall_by_bin"],
            accuracy=d["lesion"]["accuracy"],
            confusion=np.asarray(d["lesion"]["confusion"], dtype=np.int64),
            n_tp=d["lesion"]["n_tp"],
            n_fp=d["lesion"]["n_fp"],
            n_fn=d["lesion"]["n_fn"],
            n_ignored_pred=d["lesion"]["n_ignored_pred"],
        )
        patient = PatientMetrics(
            sensitivity=d["patient"]["sensitivity"],
            specificity_normal=d["patient"]["specificity_normal"],
            specificity_hard=d["patient"]["specificity_hard"],
            auc=d["patient"]["auc"],
            roc={k: [tuple(p) for p in v] for k, v in d["patient"]["roc"].items()},
            n_tumor=d["patient"]["n_tumor"],
            n_normal=d["patient"]["n_normal"],
            n_hard=d["patient"]["n_hard"],
        )
        return cls(
            tag=d["tag"],
            n_cases=d["n_cases"],
            case_ids=d["case_ids"],
            dice_cases=d["dice_cases"],
            dice_mean=d["dice_mean"],
            lesion=lesion,
            patient=patient,
            type_auc_mean=d.get("type_auc_mean"),
            extras=d.get("extras", {}),
        )


def evaluate_cases(
    gt_cases,
    predictions,
    tag: str = "",
    dice_threshold: float = 0.2,
    min_radius_mm: float = 3.0,
    bins=(5.0, 10.0, 20.0),
    screening_threshold: float = 0.5,
) -> EvalReport:
    """Evaluate matched (case, prediction) lists into one report."""
    by_id = {p.case_id: p for p in predictions}
    missing = [rec.case_id for rec in gt_cases if rec.case_id not in by_id]
    if missing:
        raise ValueError(f"predictions missing for case ids: {missing}")
    tables = []
    dices = []
    patient_cases = []
    case_ids = []
    for rec in gt_cases:
        pred = by_id[rec.case_id]
        case_ids.append(rec.case_id)
        tables.append(
            match_lesions(rec.instances, pred.instances, rec.semantic.shape,
                          dice_threshold, min_radius_mm)
        )
        dices.append(dice_per_case(rec.semantic, pred.tumor_mask()))
        patient_cases.append(
            PatientCase(
                case_id=rec.case_id,
                cohort=rec.cohort,
                scores=np.asarray(pred.patient_scores, dtype=np.float64),
                labels=np.asarray(rec.patient_labels, dtype=np.int64),
            )
        )
    lesion = lesion_metrics(tables, bins)
    patient = patient_metrics(patient_cases, screening_threshold)
    type_aucs = [patient.auc[name] for name in PATIENT_LABEL_NAMES[3:]]
    defined = [a for a in type_aucs if a is not None]
    return EvalReport(
        tag=tag,
        n_cases=len(gt_cases),
        case_ids=case_ids,
        dice_cases=[float(d) for d in dices],
        dice_mean=float(np.mean(dices)) if dices else None,
        lesion=lesion,
        patient=patient,
        type_auc_mean=float(np.mean(defined)) if defined else None,
    )
