"""Report files: JSON, CSV tables mirroring the patient/lesion result layouts,
ROC point lists, and optional plots. All output is byte-deterministic for
identical inputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .labels import TUMOR_TYPE_NAMES
from .metrics import SIZE_BIN_NAMES, EvalReport

PATIENT_CSV_COLUMNS = (
    "tag",
    "sensitivity",
    "specificity_normal",
    "specificity_hard",
    "auc_malignant",
    "auc_benign",
    "auc_any_tumor",
    "auc_type_avg",
)
LESION_CSV_COLUMNS = (
    "tag",
    "precision",
    "recall",
    *SIZE_BIN_NAMES,
    "accuracy",
    "dice_mean",
)


def _fmt(value) -> str:
    if value is None:
        return "absent"
    return f"{value:.4f}"


def patient_row(report: EvalReport) -> list[str]:
    return [
        report.tag,
        _fmt(report.patient.sensitivity),
        _fmt(report.patient.specificity_normal),
        _fmt(report.patient.specificity_hard),
        _fmt(report.patient.auc.get("any_malignant")),
        _fmt(report.patient.auc.get("any_benign")),
        _fmt(report.patient.auc.get("any_tumor")),
        _fmt(report.type_auc_mean),
    ]


def lesion_row(report: EvalReport) -> list[str]:
    return [
        report.tag,
        _fmt(report.lesion.precision),
        _fmt(report.lesion.recall),
        *[_fmt(report.lesion.recall_by_bin.get(name)) for name in SIZE_BIN_NAMES],
        _fmt(report.lesion.accuracy),
        _fmt(report.dice_mean),
    ]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(report: EvalReport, out_dir, plots: bool = False) -> list[Path]:
    """Write report.json plus the patient/lesion/confusion/ROC tables.

    Returns the list of files written. Plot emission needs matplotlib and is
    off by default.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    written.append(json_path)

    patient_path = out_dir / "patient_table.csv"
    _write_csv(patient_path, PATIENT_CSV_COLUMNS, [patient_row(report)])
    written.append(patient_path)

    lesion_path = out_dir / "lesion_table.csv"
    _write_csv(lesion_path, LESION_CSV_COLUMNS, [lesion_row(report)])
    written.append(lesion_path)

    conf_path = out_dir / "confusion_matrix.csv"
    conf_rows = [
        [true_name, *[str(int(v)) for v in row]]
        for true_name, row in zip(TUMOR_TYPE_NAMES, report.lesion.confusion)
    ]
    _write_csv(conf_path, ("true\\pred", *TUMOR_TYPE_NAMES), conf_rows)
    written.append(conf_path)

    for name in ("any_tumor", "any_benign", "any_malignant"):
        pts = report.patient.roc.get(name, [])
        roc_path = out_dir / f"roc_{name}.csv"
        _write_csv(
            roc_path,
            ("threshold", "fpr", "tpr"),
            [[f"{t:.6g}", f"{x:.6f}", f"{y:.6f}"] for t, x, y in pts],
        )
        written.append(roc_path)

    if plots:
        written.extend(_emit_plots(report, out_dir))
    return written


def _emit_plots(report: EvalReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(report.lesion.confusion, cmap="Blues")
    ax.set_xticks(range(len(TUMOR_TYPE_NAMES)), TUMOR_TYPE_NAMES, rotation=45)
    ax.set_yticks(range(len(TUMOR_TYPE_NAMES)), TUMOR_TYPE_NAMES)
    ax.set_xlabel("predicted type")
    ax.set_ylabel("true type")
    fig.colorbar(im)
    fig.tight_layout()
    conf_png = out_dir / "confusion_matrix.png"
    fig.savefig(conf_png, dpi=120)
    plt.close(fig)
    written.append(conf_png)

    fig, ax = plt.subplots(figsize=(5, 4))
    for name in ("any_tumor", "any_benign", "any_malignant"):
        pts = report.patient.roc.get(name, [])
        if len(pts) > 1:
            ax.plot([p[1] for p in pts], [p[2] for p in pts], label=name)
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend()
    fig.tight_layout()
    roc_png = out_dir / "roc_curves.png"
    fig.savefig(roc_png, dpi=120)
    plt.close(fig)
    written.append(roc_png)
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def comparison_table(reports: list[EvalReport], out_path) -> Path:
    """One comparison CSV with a row per run tag (for ablation studies)."""
    out_path = Path(out_path)
    header = (
        "tag",
        "sensitivity",
        "specificity_normal",
        "specificity_hard",
        "auc_malignant",
        "auc_benign",
        "precision",
        "recall",
        "accuracy",
        "dice_mean",
    )
    rows = []
    for rep in reports:
        rows.append(
            [
                rep.tag,
                _fmt(rep.patient.sensitivity),
                _fmt(rep.patient.specificity_normal),
                _fmt(rep.patient.specificity_hard),
                _fmt(rep.patient.auc.get("any_malignant")),
                _fmt(rep.patient.auc.get("any_benign")),
                _fmt(rep.lesion.precision),
                _fmt(rep.lesion.recall),
                _fmt(rep.lesion.accuracy),
                _fmt(rep.dice_mean),
            ]
        )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out_path, header, rows)
    return out_path
