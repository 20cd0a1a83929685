"""Shared fixtures: a small generator config and a cached tiny dataset."""

import pytest
import torch

from planseg.config import ExperimentConfig, config_from_dict
from planseg.dataset import build_dataset
from planseg.phantom import GeneratorConfig, generate_case


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def gen_config() -> GeneratorConfig:
    return GeneratorConfig()


@pytest.fixture(scope="session")
def tumor_case(gen_config):
    return generate_case(7, "tumor", gen_config, case_id="fixture_tumor")


@pytest.fixture(scope="session")
def normal_case(gen_config):
    return generate_case(8, "normal", gen_config, case_id="fixture_normal")


def tiny_experiment_config(**overrides) -> ExperimentConfig:
    raw = {
        "data": {"n_train": 2, "n_val": 1, "n_test": 2, "cohort_mix": [0.5, 0.0, 0.5]},
        "model": {"base_width": 8},
        "train": {
            "epochs_stage1": 1,
            "epochs_stage2": 1,
            "patch_shape": [64, 64, 16],
            "val_every": 1,
        },
    }
    for section, values in overrides.items():
        raw.setdefault(section, {}).update(values)
    return config_from_dict(raw, raw_text=f"# tiny test profile\n# {sorted(overrides)}\n")


@pytest.fixture(scope="session")
def tiny_config() -> ExperimentConfig:
    return tiny_experiment_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    """2 train / 1 val / 2 test cases on disk, shared across test modules."""
    out = tmp_path_factory.mktemp("dataset")
    d = tiny_config.data
    manifest = build_dataset(d.n_train, d.n_val, d.n_test, 11, d.generator_config(), out)
    return out, manifest
