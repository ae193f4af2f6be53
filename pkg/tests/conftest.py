import numpy as np
import pytest
import torch

from skillcomp.model import ModelConfig, Trajectory, init_parameters
from skillcomp.synthdata import default_manifest, generate_dataset

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_state=2, d_action=2, d_latent=2, encoder_hidden=4, attention_dim=3,
                       policy_hidden=5, dynamics_hidden=5, with_aux=True)


@pytest.fixture
def tiny_bundle(tiny_config):
    return init_parameters(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_traj(rng, T=3, d_state=2, d_action=2, skill="s"):
    return Trajectory(rng.normal(size=(T, d_state)), rng.normal(size=(T, d_action)), skill)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(default_manifest(demos_per_skill=4))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import lines

    report = lines()
    if report:
        terminalreporter.section("acceptance criteria")
        for line in report:
            terminalreporter.write_line(line)
