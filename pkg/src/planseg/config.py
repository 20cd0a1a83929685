"""Experiment configuration: TOML profiles with strict key checking.

Dataclass defaults are the reference hyperparameters (spacing 0.7x0.7x5 mm,
Q=20 queries, M=64 channels, K=12544 sampled points, n=3 foreground points,
no-object weight 0.1, loss weights 2/2/5/1/0.1, learning rate 1e-4, patches
256x256x24, 500+500 epochs); profile files override them, and the desk-scale
profile shipped in ``configs/desk.toml`` shrinks everything to laptop size.
Unknown keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentPolicy
from .phantom import GeneratorConfig, LesionTypeSignature


class ConfigError(ValueError):
    """Invalid or unknown configuration content (CLI exit code 2)."""


@dataclass
class DataConfig:
    shape: tuple[int, int, int] = (96, 96, 32)
    spacing: tuple[float, float, float] = (0.7, 0.7, 5.0)
    cohort_mix: tuple[float, float, float] = (0.4, 0.2, 0.4)
    n_train: int = 64
    n_val: int = 8
    n_test: int = 32
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_mm: tuple[float, float] = (5.0, 15.0)
    noise_sigma: float = 5.0
    white_noise_sigma: float = 2.0
    hard_noise_sigma: float = 12.0
    bias_field_amplitude: float = 0.12
    diffuse_shift: float = 22.0
    signature_margin: float = 25.0
    ignored_fraction: float = 0.0
    signatures: list = field(default_factory=list)  # optional full override (8 tables)

    def generator_config(self) -> GeneratorConfig:
        kwargs = {
            f.name: getattr(self, f.name)
            for f in fields(GeneratorConfig)
            if f.name not in ("signatures", "max_attempts")
        }
        if self.signatures:
            kwargs["signatures"] = tuple(
                LesionTypeSignature(
                    type_id=int(s["type_id"]),
                    name=str(s["name"]),
                    phase_offsets=tuple(float(v) for v in s["phase_offsets"]),
                    texture_amplitude=float(s.get("texture_amplitude", 6.0)),
                    count_weight=float(s.get("count_weight", 1.0)),
                    radius_range_mm=tuple(s["radius_range_mm"]) if "radius_range_mm" in s else None,
                )
                for s in self.signatures
            )
        return GeneratorConfig(**kwargs)


@dataclass
class ModelConfig:
    embed_dim: int = 64  # M
    num_queries: int = 20  # Q, learned queries
    max_anchor_queries: int = 20
    base_width: int = 16
    decoder_blocks: int = 3
    attn_heads: int = 8
    patient_tokens: int = 8
    patient_blocks: int = 2
    pos_grid: int = 8  # learned positional-embedding grid, interpolated per scale
    norm_center: float = 100.0  # intensity normalization: (I - center) / scale
    norm_scale: float = 60.0


@dataclass
class ObjectiveConfig:
    num_points: int = 12544  # K
    fg_points: int = 3  # n guaranteed foreground points per matched lesion
    lambda_pixel: float = 2.0
    lambda_lesion_class: float = 2.0
    lambda_lesion_mask: float = 5.0
    lambda_patient: float = 1.0
    lambda_consistency: float = 0.1
    no_object_weight: float = 0.1
    anchor_queries: bool = True
    fes: bool = True
    consistency: bool = True
    importance_oversample: int = 3
    importance_beta: float = 0.75


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs_stage1: int = 500
    epochs_stage2: int = 500
    batch_size: int = 2
    patch_shape: tuple[int, int, int] = (256, 256, 24)
    oversample_fg: float = 0.5
    crop_margin_mm: float = 8.0
    min_target_voxels: int = 4
    deterministic: bool = True
    num_threads: int = 2
    seed: int = 0
    val_every: int = 5
    augment_scale: bool = True
    augment_flip: bool = True
    augment_elastic: bool = True
    augment_brightness: bool = True
    scale_range: tuple[float, float] = (0.9, 1.15)
    elastic_magnitude_mm: float = 2.5
    brightness_shift: float = 10.0

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            crop=True,
            crop_shape=tuple(self.patch_shape),
            crop_fg_bias=self.oversample_fg,
            scale=self.augment_scale,
            scale_range=tuple(self.scale_range),
            flip=self.augment_flip,
            elastic=self.augment_elastic,
            elastic_magnitude_mm=self.elastic_magnitude_mm,
            brightness=self.augment_brightness,
            brightness_shift=self.brightness_shift,
        )


@dataclass
class InferConfig:
    tau_query: float = 0.5
    tau_mask: float = 0.5
    min_radius_mm: float = 3.0
    crop_margin_mm: float = 8.0


@dataclass
class EvalConfig:
    dice_threshold: float = 0.2
    size_bins: tuple[float, float, float] = (5.0, 10.0, 20.0)
    screening_threshold: float = 0.5
    plots: bool = False


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "objective": ObjectiveConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    raw_text: str = ""  # verbatim profile content, echoed into artifacts

    def sha256(self) -> str:
        return hashlib.sha256(self.raw_text.encode()).hexdigest()

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def _coerce(value, target):
    if isinstance(target, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def config_from_dict(raw: dict, raw_text: str = "") -> ExperimentConfig:
    unknown_sections = set(raw) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    cfg = ExperimentConfig(raw_text=raw_text)
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section [{name}] must be a table")
        known = {f.name: f for f in fields(cls)}
        unknown = set(section) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        target = getattr(cfg, name)
        for key, value in section.items():
            setattr(target, key, _coerce(value, getattr(target, key)))
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if any(s <= 0 for s in cfg.data.spacing):
        raise ConfigError(f"spacing must be positive, got {cfg.data.spacing}")
    if abs(sum(cfg.data.cohort_mix) - 1.0) > 1e-9:
        raise ConfigError(f"cohort_mix must sum to 1, got {cfg.data.cohort_mix}")
    px, py, pz = cfg.train.patch_shape
    if px % 16 or py % 16 or pz % 4:
        raise ConfigError(
            f"patch_shape must be divisible by (16, 16, 4) for the backbone strides, "
            f"got {cfg.train.patch_shape}"
        )
    if cfg.objective.num_points < 1:
        raise ConfigError("num_points must be >= 1")
    if cfg.objective.fg_points < 0:
        raise ConfigError("fg_points must be >= 0")
    if not 0 < cfg.objective.importance_beta <= 1:
        raise ConfigError("importance_beta must be in (0, 1]")
    try:
        cfg.data.generator_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


DETERMINISM_ENV_VAR = "PLAN_DETERMINISTIC"


def deterministic_mode(cfg: ExperimentConfig) -> bool:
    """Effective determinism flag: the env var overrides the [train] setting."""
    raw = os.environ.get(DETERMINISM_ENV_VAR)
    if raw is None:
        return cfg.train.deterministic
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{DETERMINISM_ENV_VAR} must be a boolean-like value, got {raw!r}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, raw_text=text)
