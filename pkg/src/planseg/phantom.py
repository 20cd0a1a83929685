"""Seedable synthetic multi-phase liver phantom generator.

Each case is a pure function of ``(seed, cohort, config)``: a smooth random
liver blob, five neighboring organ blobs, and (for the tumor cohort) typed
lesions carved strictly inside the liver. The three contrast phases are
derived from one anatomy plus per-structure and per-lesion-type phase offsets,
so they come out co-registered by construction.

Intensities are HU-like but deliberately uncalibrated; the lesion-type
signatures are configuration data so experiments can harden or soften class
separability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .labels import (
    LABEL_IGNORED,
    LABEL_LIVER,
    NUM_TUMOR_TYPES,
    TUMOR_TYPE_NAMES,
    derive_patient_labels,
    instances_from_semantic,
    tumor_label,
)
from .volume import LesionInstance, Volume

PHASE_NAMES = ("nc", "arterial", "venous")
COHORTS = ("normal", "hard_normal", "tumor")


class GenerationError(RuntimeError):
    """Raised when lesion placement cannot satisfy the config after bounded retries."""


@dataclass(frozen=True)
class LesionTypeSignature:
    """Synthetic contrast behavior of one tumor type.

    ``phase_offsets`` are additive intensity offsets relative to liver
    parenchyma in (non-contrast, arterial, venous) order. The default set
    keeps a minimum pairwise L2 offset distance of ~49 intensity units, which
    is what makes the eight types separable.
    """

    type_id: int
    name: str
    phase_offsets: tuple[float, float, float]
    texture_amplitude: float = 5.0
    count_weight: float = 1.0
    radius_range_mm: tuple[float, float] | None = None  # None: use config default


def default_signatures() -> tuple[LesionTypeSignature, ...]:
    offsets = {
        "HCC": (-20.0, 55.0, 5.0),
        "ICC": (-15.0, 10.0, 55.0),
        "meta": (-35.0, -10.0, -30.0),
        "hepato": (30.0, 40.0, 45.0),
        "heman": (-10.0, 65.0, 60.0),
        "FNH": (25.0, 90.0, 15.0),
        "cyst": (-60.0, -60.0, -60.0),
        "others": (40.0, -15.0, 10.0),
    }
    return tuple(
        LesionTypeSignature(type_id=t, name=name, phase_offsets=offsets[name])
        for t, name in enumerate(TUMOR_TYPE_NAMES, start=1)
    )


@dataclass
class GeneratorConfig:
    shape: tuple[int, int, int] = (96, 96, 32)
    spacing: tuple[float, float, float] = (0.7, 0.7, 5.0)
    cohort_mix: tuple[float, float, float] = (0.4, 0.2, 0.4)  # normal, hard, tumor
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (5.0, 15.0)  # log-uniform draw
    noise_sigma: float = 5.0
    white_noise_sigma: float = 2.0
    hard_noise_sigma: float = 12.0
    bias_field_amplitude: float = 0.12
    diffuse_shift: float = 22.0
    signature_margin: float = 25.0  # asserted minimum mean-intensity separation
    ignored_fraction: float = 0.0
    max_attempts: int = 60
    signatures: tuple[LesionTypeSignature, ...] = field(default_factory=default_signatures)

    def __post_init__(self):
        if self.shape[0] < 64 or self.shape[1] < 64 or self.shape[2] < 16:
            raise ValueError(f"grid must be at least 64x64x16, got {self.shape}")
        if abs(sum(self.cohort_mix) - 1.0) > 1e-9:
            raise ValueError(f"cohort mix must sum to 1, got {self.cohort_mix}")
        if len(self.signatures) != NUM_TUMOR_TYPES:
            raise ValueError(f"expected {NUM_TUMOR_TYPES} signatures, got {len(self.signatures)}")


@dataclass
class PhaseStack:
    """Three co-registered phase volumes in (nc, arterial, venous) order."""

    phases: tuple[Volume, Volume, Volume]
    case_id: str = ""

    def __post_init__(self):
        if len(self.phases) != 3:
            raise ValueError("a phase stack holds exactly three phases")
        first = self.phases[0]
        for ph in self.phases[1:]:
            if not first.same_grid(ph):
                raise ValueError("phases must share one grid")

    @property
    def shape(self):
        return self.phases[0].shape

    @property
    def spacing(self):
        return self.phases[0].spacing


@dataclass
class CaseRecord:
    """One subject: phase stack, semantic labels, lesion instances, patient labels."""

    case_id: str
    cohort: str
    stack: PhaseStack
    semantic: Volume
    instances: list[LesionInstance]
    patient_labels: np.ndarray

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValueError(f"unknown cohort {self.cohort!r}")


# Per-structure base intensities and (nc, arterial, venous) enhancement offsets.
_BASE_INTENSITY = {
    0: 35.0,  # background soft tissue
    1: 100.0,  # liver
    2: 30.0,  # gallbladder
    3: 110.0,  # hepatic vein
    4: 90.0,  # spleen
    5: 55.0,  # stomach
    6: 75.0,  # pancreas
}
_PHASE_OFFSETS = {
    0: (0.0, 2.0, 4.0),
    1: (0.0, 8.0, 12.0),
    2: (0.0, 3.0, 5.0),
    3: (0.0, 12.0, 45.0),
    4: (0.0, 22.0, 15.0),
    5: (0.0, 6.0, 9.0),
    6: (0.0, 10.0, 12.0),
}


def _smooth_field(rng: np.random.Generator, shape, sigma_vox) -> np.ndarray:
    """Unit-variance low-frequency noise field."""
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma_vox)
    std = field_.std()
    if std > 0:
        field_ /= std
    return field_.astype(np.float32)


def _ellipsoid(shape, spacing, center_mm, semi_mm, angle: float = 0.0) -> np.ndarray:
    """Binary ellipsoid with physical semi-axes, rotated in-plane by ``angle``."""
    idx = np.indices(shape, dtype=np.float32)
    phys = [idx[a] * spacing[a] - center_mm[a] for a in range(3)]
    ca, sa = math.cos(angle), math.sin(angle)
    rx = ca * phys[0] + sa * phys[1]
    ry = -sa * phys[0] + ca * phys[1]
    rz = phys[2]
    val = (rx / semi_mm[0]) ** 2 + (ry / semi_mm[1]) ** 2 + (rz / semi_mm[2]) ** 2
    return val <= 1.0


def _make_liver(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    shape = cfg.shape
    spacing = cfg.spacing
    extent = np.array(shape) * np.array(spacing)
    for _ in range(cfg.max_attempts):
        center = extent * np.array([0.5, 0.47, 0.5]) + rng.uniform(-4, 4, size=3) * np.array(
            [1.0, 1.0, 2.0]
        )
        mask = np.zeros(shape, dtype=np.float32)
        base_semi = np.array([0.34 * extent[0], 0.31 * extent[1], 0.36 * extent[2]])
        for _ in range(3):
            jit = rng.uniform(-5, 5, size=3) * np.array([1.0, 1.0, 2.0])
            semi = base_semi * rng.uniform(0.8, 1.05, size=3)
            mask = np.maximum(mask, _ellipsoid(shape, spacing, center + jit, semi).astype(np.float32))
        mask = ndimage.gaussian_filter(mask, sigma=(1.5, 1.5, 0.5)) > 0.5
        labeled, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
        if n == 1 and mask.sum() > 0.05 * mask.size:
            return mask
    raise GenerationError("could not form a single-component liver blob")


# Organ placement: (label, semi-axes mm, offset from liver center mm, inside liver)
_ORGAN_SPECS = (
    (2, (8.0, 6.0, 12.0), (14.0, -18.0, -28.0), False),  # gallbladder
    (3, (3.2, 3.2, 45.0), (0.0, 0.0, 0.0), True),  # hepatic vein
    (4, (12.0, 10.0, 28.0), (27.0, 16.0, 18.0), False),  # spleen
    (5, (15.0, 12.0, 24.0), (-24.0, 18.0, 2.0), False),  # stomach
    (6, (16.0, 7.0, 11.0), (-8.0, 24.0, -12.0), False),  # pancreas
)


def _place_organs(rng, cfg, labels: np.ndarray, liver: np.ndarray) -> None:
    com = np.array(ndimage.center_of_mass(liver)) * np.array(cfg.spacing)
    for lab, semi, offset, inside in _ORGAN_SPECS:
        center = com + np.array(offset) + rng.uniform(-3, 3, size=3)
        semi_j = np.array(semi) * rng.uniform(0.85, 1.15, size=3)
        mask = _ellipsoid(cfg.shape, cfg.spacing, center, semi_j, angle=rng.uniform(0, math.pi))
        if inside:
            mask &= liver
        else:
            mask &= ~liver
            mask &= labels == 0
        labels[mask] = lab


def _carve_lesions(
    rng: np.random.Generator, cfg: GeneratorConfig, labels: np.ndarray
) -> list[int]:
    """Place typed lesions inside the liver; returns the list of drawn type ids."""
    liver = labels == LABEL_LIVER
    edt = ndimage.distance_transform_edt(liver, sampling=cfg.spacing)
    n_lesions = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    weights = np.array([s.count_weight for s in cfg.signatures], dtype=float)
    weights /= weights.sum()
    placed_types: list[int] = []
    tumor_dilated = np.zeros(cfg.shape, dtype=bool)
    for _ in range(n_lesions):
        sig = cfg.signatures[int(rng.choice(NUM_TUMOR_TYPES, p=weights))]
        for attempt in range(cfg.max_attempts):
            lo, hi = sig.radius_range_mm or cfg.lesion_radius_mm
            radius = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
            semi = radius * rng.uniform(0.85, 1.3, size=3)
            semi[2] = max(semi[2], 1.05 * cfg.spacing[2])  # span at least two slices
            need = float(semi.max()) * 1.1 + 1.0
            cand = np.argwhere((edt >= need) & liver)
            if cand.size == 0:
                continue
            center_vox = cand[int(rng.integers(len(cand)))]
            center_mm = center_vox * np.array(cfg.spacing)
            mask = _deformed_ellipsoid(rng, cfg, center_mm, semi)
            mask &= liver
            if mask.sum() < 24 or (mask & tumor_dilated).any():
                continue
            eff_r = (3.0 * mask.sum() * np.prod(cfg.spacing) / (4.0 * math.pi)) ** (1 / 3)
            if eff_r < 3.5:
                continue
            # exactly one component, fully interior: one-voxel dilation stays in liver
            dilated = ndimage.binary_dilation(mask, np.ones((3, 3, 3), dtype=bool))
            if (dilated & ~liver).any():
                continue
            if ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))[1] != 1:
                continue
            if rng.random() < cfg.ignored_fraction:
                labels[mask] = LABEL_IGNORED
            else:
                labels[mask] = tumor_label(sig.type_id)
            tumor_dilated |= ndimage.binary_dilation(mask, np.ones((3, 3, 3), dtype=bool))
            placed_types.append(sig.type_id)
            break
        else:
            raise GenerationError(
                f"could not place a {sig.name} lesion of radius range "
                f"{sig.radius_range_mm or cfg.lesion_radius_mm} mm inside the liver "
                f"after {cfg.max_attempts} attempts"
            )
    return placed_types


def _deformed_ellipsoid(rng, cfg, center_mm, semi_mm) -> np.ndarray:
    angle = float(rng.uniform(0, math.pi))
    idx = np.indices(cfg.shape, dtype=np.float32)
    phys = [idx[a] * cfg.spacing[a] - center_mm[a] for a in range(3)]
    ca, sa = math.cos(angle), math.sin(angle)
    rx = ca * phys[0] + sa * phys[1]
    ry = -sa * phys[0] + ca * phys[1]
    val = (rx / semi_mm[0]) ** 2 + (ry / semi_mm[1]) ** 2 + (phys[2] / semi_mm[2]) ** 2
    wobble = _smooth_field(rng, cfg.shape, (2.0, 2.0, 0.8))
    return val <= 1.0 + 0.2 * wobble


def generate_case(seed: int, cohort: str, config: GeneratorConfig, case_id: str = "") -> CaseRecord:
    """Generate one deterministic synthetic case.

    The same ``(seed, cohort, config)`` always produces byte-identical data.
    The tumor cohort draws lesions; ``hard_normal`` has zero lesions but extra
    noise, a multiplicative bias field, and a diffuse liver intensity shift.
    """
    if cohort not in COHORTS:
        raise ValueError(f"unknown cohort {cohort!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, COHORTS.index(cohort)]))
    cfg = config
    labels = np.zeros(cfg.shape, dtype=np.uint8)
    liver = _make_liver(rng, cfg)
    labels[liver] = LABEL_LIVER
    _place_organs(rng, cfg, labels, liver)
    if cohort == "tumor":
        _carve_lesions(rng, cfg, labels)

    base_jitter = {lab: float(rng.uniform(-5, 5)) for lab in _BASE_INTENSITY}
    base = np.zeros(cfg.shape, dtype=np.float32)
    for lab, intensity in _BASE_INTENSITY.items():
        base[labels == lab] = intensity + base_jitter[lab]
    # Lesions start from liver parenchyma intensity; the offsets are per phase.
    lesion_region = labels > max(_BASE_INTENSITY)  # tumor labels and the ignored label
    base[lesion_region] = _BASE_INTENSITY[LABEL_LIVER] + base_jitter[LABEL_LIVER]

    noise_sigma = cfg.hard_noise_sigma if cohort == "hard_normal" else cfg.noise_sigma
    bias = None
    diffuse = 0.0
    if cohort == "hard_normal":
        bias = 1.0 + cfg.bias_field_amplitude * _smooth_field(rng, cfg.shape, (10, 10, 3))
        diffuse = float(rng.uniform(0.4, 1.0) * cfg.diffuse_shift * rng.choice([-1.0, 1.0]))

    phases = []
    for p in range(3):
        img = base.copy()
        for lab, offs in _PHASE_OFFSETS.items():
            img[labels == lab] += offs[p]
        for sig in cfg.signatures:
            region = labels == tumor_label(sig.type_id)
            if region.any():
                img[region] += sig.phase_offsets[p]
                img[region] += sig.texture_amplitude * _smooth_field(
                    rng, cfg.shape, (1.5, 1.5, 0.6)
                )[region]
        ignored_region = labels == LABEL_IGNORED
        if ignored_region.any():
            img[ignored_region] += float(rng.uniform(-40, 40))
        if diffuse:
            img[liver] += diffuse
        img += noise_sigma * _smooth_field(rng, cfg.shape, (3.0, 3.0, 1.0))
        img += cfg.white_noise_sigma * rng.standard_normal(cfg.shape).astype(np.float32)
        if bias is not None:
            img *= bias
        phases.append(Volume(img.astype(np.float32), cfg.spacing))

    semantic = Volume(labels, cfg.spacing)
    instances = instances_from_semantic(semantic)
    record = CaseRecord(
        case_id=case_id or f"seed{seed}",
        cohort=cohort,
        stack=PhaseStack(phases=tuple(phases), case_id=case_id or f"seed{seed}"),
        semantic=semantic,
        instances=instances,
        patient_labels=derive_patient_labels(instances),
    )
    return record


def signature_offset_margin(signatures: tuple[LesionTypeSignature, ...]) -> float:
    """Minimum pairwise L2 distance between the phase-offset triples."""
    best = math.inf
    for i in range(len(signatures)):
        for j in range(i + 1, len(signatures)):
            a = np.array(signatures[i].phase_offsets)
            b = np.array(signatures[j].phase_offsets)
            best = min(best, float(np.linalg.norm(a - b)))
    return best
