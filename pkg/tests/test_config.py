"""Config loading: defaults, overrides, strict key rejection, validation."""

from pathlib import Path

import pytest

from planseg.config import ConfigError, ExperimentConfig, config_from_dict, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_reference_defaults():
    cfg = ExperimentConfig()
    assert cfg.data.spacing == (0.7, 0.7, 5.0)
    assert cfg.model.num_queries == 20
    assert cfg.model.embed_dim == 64
    assert cfg.objective.num_points == 12544
    assert cfg.objective.fg_points == 3
    assert cfg.objective.no_object_weight == 0.1
    assert (cfg.objective.lambda_pixel, cfg.objective.lambda_lesion_class,
            cfg.objective.lambda_lesion_mask, cfg.objective.lambda_patient,
            cfg.objective.lambda_consistency) == (2.0, 2.0, 5.0, 1.0, 0.1)
    assert cfg.train.learning_rate == 1e-4
    assert cfg.train.patch_shape == (256, 256, 24)
    assert (cfg.train.epochs_stage1, cfg.train.epochs_stage2) == (500, 500)
    assert cfg.infer.tau_query == 0.5 and cfg.infer.tau_mask == 0.5
    assert cfg.infer.min_radius_mm == 3.0
    assert cfg.eval.dice_threshold == 0.2


def test_unknown_section_and_key_rejected():
    with pytest.raises(ConfigError, match="sections"):
        config_from_dict({"nonsense": {}})
    with pytest.raises(ConfigError, match="objective"):
        config_from_dict({"objective": {"lambda_pix": 1.0}})


def test_patch_shape_divisibility_enforced():
    with pytest.raises(ConfigError, match="divisible"):
        config_from_dict({"train": {"patch_shape": [60, 64, 16]}})
    with pytest.raises(ConfigError, match="divisible"):
        config_from_dict({"train": {"patch_shape": [64, 64, 15]}})


def test_mixture_and_spacing_validated():
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"cohort_mix": [0.5, 0.5, 0.5]}})
    with pytest.raises(ConfigError):
        config_from_dict({"data": {"spacing": [0.7, 0.0, 5.0]}})


def test_shipped_profiles_load():
    desk = load_config(CONFIGS / "desk.toml")
    assert desk.train.patch_shape == (96, 96, 24)
    assert desk.train.epochs_stage1 == 50 and desk.train.epochs_stage2 == 50
    assert desk.train.batch_size == 2
    assert desk.raw_text.startswith("#")
    paper = load_config(CONFIGS / "paper.toml")
    assert paper.train.learning_rate == 1e-4
    assert paper.train.patch_shape == (256, 256, 24)
    assert paper.train.epochs_stage1 == 500
    assert paper.objective.num_points == 12544


def test_config_echo_and_hash():
    cfg = load_config(CONFIGS / "desk.toml")
    assert cfg.sha256() == load_config(CONFIGS / "desk.toml").sha256()
    d = cfg.to_dict()
    assert set(d) == {"data", "model", "objective", "train", "infer", "eval"}


def test_determinism_env_var_overrides(monkeypatch):
    from planseg.config import DETERMINISM_ENV_VAR, deterministic_mode

    cfg = ExperimentConfig()
    assert cfg.train.deterministic is True
    assert deterministic_mode(cfg) is True
    monkeypatch.setenv(DETERMINISM_ENV_VAR, "0")
    assert deterministic_mode(cfg) is False
    monkeypatch.setenv(DETERMINISM_ENV_VAR, "on")
    assert deterministic_mode(cfg) is True
    monkeypatch.setenv(DETERMINISM_ENV_VAR, "maybe")
    with pytest.raises(ConfigError):
        deterministic_mode(cfg)


def test_signature_override_round_trip():
    sig = {
        "type_id": 1, "name": "HCC", "phase_offsets": [-30.0, 60.0, 0.0],
        "texture_amplitude": 4.0,
    }
    sigs = [dict(sig, type_id=t, name=f"t{t}", phase_offsets=[t * 10.0, 0.0, 0.0])
            for t in range(1, 9)]
    cfg = config_from_dict({"data": {"signatures": sigs}})
    gen = cfg.data.generator_config()
    assert gen.signatures[0].phase_offsets == (10.0, 0.0, 0.0)
    assert gen.signatures[7].name == "t8"
