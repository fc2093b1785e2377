import pytest


from cmst.datagen import SyntheticConfig, generate_synthetic
from cmst.training import ExperimentConfig

ACCEPTANCE_LINES = []


def small_config(**overrides):
    """A few-second training configuration for unit and integration tests."""
    base = {
        "data": {"n_classes": 4, "n_pairs": 120, "d_v": 12, "d_t": 10, "latent_dim": 4,
                 "class_sep": 1.5, "noise_sigma": 0.4, "seed": 3},
        "epochs": 4,
        "batch_size": 16,
        "strategy": {"siamese_pretrain_epochs": 2},
        "model": {"siamese_hidden": [16], "d_sim": 8, "generator_hidden": [16],
                  "d_s": 8, "discriminator_hidden": [8, 8]},
        "eval": {"ks": [1, 5], "truncation": 10, "every": 2},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return ExperimentConfig.from_dict(base)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def small_dataset(small_cfg):
    return generate_synthetic(small_cfg.data)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SyntheticConfig())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
