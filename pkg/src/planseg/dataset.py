"""Dataset construction: on-disk case bundles, manifests, and splits.

A case directory holds the three phase volumes, the semantic label volume, an
instance-id label volume, and a ``case.json`` sidecar with per-instance
metadata and the patient label vector. The manifest ties cases to splits and
echoes the generator configuration, so a dataset is reproducible from the
manifest alone.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import __version__
from .labels import (
    LABEL_LIVER,
    NUM_ORGANS,
    derive_patient_labels,
    instances_from_semantic,
    label_conventions,
)
from .nifti import read_volume, write_volume
from .phantom import (
    COHORTS,
    PHASE_NAMES,
    CaseRecord,
    GeneratorConfig,
    PhaseStack,
    generate_case,
)
from .volume import LesionInstance, Volume, apply_crop, region_bounding_box

MANIFEST_SCHEMA_VERSION = 1
CASE_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_case(rec: CaseRecord, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for name, vol in zip(PHASE_NAMES, rec.stack.phases):
        write_volume(case_dir / f"{name}.nii.gz", vol)
    write_volume(case_dir / "semantic.nii.gz", rec.semantic)
    ids = np.zeros(rec.semantic.shape, dtype=np.uint16)
    for inst in rec.instances:
        ids[inst.voxels[:, 0], inst.voxels[:, 1], inst.voxels[:, 2]] = inst.id
    write_volume(case_dir / "instances.nii.gz", Volume(ids, rec.semantic.spacing, rec.semantic.origin))
    _dump_json(
        case_dir / "case.json",
        {
            "schema_version": CASE_SCHEMA_VERSION,
            "case_id": rec.case_id,
            "cohort": rec.cohort,
            "shape": list(rec.semantic.shape),
            "spacing": list(rec.semantic.spacing),
            "origin": list(rec.semantic.origin),
            "patient_labels": [int(v) for v in rec.patient_labels],
            "instances": [
                {
                    "id": inst.id,
                    "type_id": inst.type_id,
                    "voxel_count": inst.voxel_count,
                    "volume_mm3": inst.volume_mm3,
                    "effective_radius_mm": inst.effective_radius_mm,
                }
                for inst in rec.instances
            ],
        },
    )


def read_case(case_dir) -> CaseRecord:
    case_dir = Path(case_dir)
    meta = json.loads((case_dir / "case.json").read_text())
    phases = tuple(read_volume(case_dir / f"{name}.nii.gz") for name in PHASE_NAMES)
    semantic = read_volume(case_dir / "semantic.nii.gz")
    id_vol = read_volume(case_dir / "instances.nii.gz").data
    instances = []
    for entry in meta["instances"]:
        voxels = np.argwhere(id_vol == entry["id"]).astype(np.int32)
        instances.append(
            LesionInstance(
                id=entry["id"],
                type_id=entry["type_id"],
                voxels=voxels,
                volume_mm3=entry["volume_mm3"],
                effective_radius_mm=entry["effective_radius_mm"],
            )
        )
    return CaseRecord(
        case_id=meta["case_id"],
        cohort=meta["cohort"],
        stack=PhaseStack(phases=phases, case_id=meta["case_id"]),
        semantic=semantic,
        instances=instances,
        patient_labels=np.asarray(meta["patient_labels"], dtype=np.int64),
    )


def cohort_counts(n: int, mix) -> dict[str, int]:
    """Split ``n`` cases over cohorts by largest-remainder rounding of the mix."""
    raw = [n * f for f in mix]
    counts = [int(np.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return dict(zip(COHORTS, counts))


def build_dataset(
    n_train: int,
    n_val: int,
    n_test: int,
    seed: int,
    config: GeneratorConfig,
    out_dir,
) -> dict:
    """Generate a dataset on disk and return its manifest.

    Case seeds derive from the master seed and a global case index, so the
    same call always produces identical data; splits are disjoint by
    construction.
    """
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ValueError(f"{name} must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    index = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        counts = cohort_counts(count, config.cohort_mix)
        cohorts = [c for c in COHORTS for _ in range(counts[c])]
        rng = np.random.default_rng(np.random.SeedSequence([seed, len(split)]))
        rng.shuffle(cohorts)
        for cohort in cohorts:
            case_id = f"case_{index:04d}"
            case_seed = int(
                np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0]
            )
            rec = generate_case(case_seed, cohort, config, case_id=case_id)
            rel = Path("cases") / case_id
            write_case(rec, out_dir / rel)
            cases.append(
                {
                    "case_id": case_id,
                    "cohort": cohort,
                    "split": split,
                    "path": str(rel),
                    "seed": case_seed,
                    "n_instances": len(rec.instances),
                }
            )
            index += 1
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "tool_version": __version__,
        "seed": seed,
        "generator_config": _config_dict(config),
        "label_conventions": label_conventions(),
        "cases": cases,
    }
    _dump_json(out_dir / MANIFEST_NAME, manifest)
    return manifest


def _config_dict(config: GeneratorConfig) -> dict:
    out = dataclasses.asdict(config)
    out["signatures"] = [dataclasses.asdict(s) for s in config.signatures]
    # normalize tuples to lists so the in-memory manifest equals the JSON file
    return json.loads(json.dumps(out))


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {data_dir}")
    return json.loads(path.read_text())


def manifest_cases(manifest: dict, split: str | None = None) -> list[dict]:
    cases = manifest["cases"]
    if split is not None:
        cases = [c for c in cases if c["split"] == split]
    return cases


def read_split(data_dir, split: str) -> list[CaseRecord]:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    return [read_case(data_dir / c["path"]) for c in manifest_cases(manifest, split)]


_HEPATIC_VEIN = 3  # sits inside the liver, so it belongs to the crop region


def liver_region_mask(semantic: Volume) -> np.ndarray:
    """Anatomical liver territory: liver label, intra-hepatic vein, and all
    lesion labels (lesions are carved out of the liver label)."""
    arr = np.asarray(semantic.data)
    return (arr == LABEL_LIVER) | (arr == _HEPATIC_VEIN) | (arr > NUM_ORGANS)


def crop_case(rec: CaseRecord, box: tuple[slice, slice, slice]) -> CaseRecord:
    """Crop every volume of a case to the box; instances are re-derived from
    the cropped semantic volume so they stay consistent with it."""
    semantic = apply_crop(rec.semantic, box)
    phases = tuple(apply_crop(ph, box) for ph in rec.stack.phases)
    instances = instances_from_semantic(semantic)
    return CaseRecord(
        case_id=rec.case_id,
        cohort=rec.cohort,
        stack=PhaseStack(phases=phases, case_id=rec.case_id),
        semantic=semantic,
        instances=instances,
        patient_labels=derive_patient_labels(instances),
    )


def liver_crop(rec: CaseRecord, margin_mm: float) -> tuple[CaseRecord, tuple[slice, slice, slice]]:
    """Crop a case to the liver bounding box plus a physical margin.

    Raises EmptyRegionError when the case has no liver voxels at all.
    """
    region = Volume(liver_region_mask(rec.semantic), rec.semantic.spacing, rec.semantic.origin)
    box = region_bounding_box(region, margin_mm)
    return crop_case(rec, box), box
