"""Compositional skill embeddings: a trajectory VAE whose latent space is shaped
so that a composite behavior's embedding is the sum of its subskills'."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    InvalidInputError,
    NonFiniteLossError,
    NonFiniteValueError,
    RolloutDivergenceError,
    SimulationError,
    SkillCompError,
    ValidationError,
)
from .latent_math import DiagGaussian, gaussian_entropy, kl_to_standard_normal, sum_gaussians  # noqa: E402
from .model import ModelConfig, Trajectory, init_parameters, load_checkpoint, save_checkpoint  # noqa: E402
from .objectives import CompositionSpec, ObjectiveConfig, regularized_loss  # noqa: E402
from .training import TrainConfig, train, train_one  # noqa: E402

__all__ = [
    "ConfigurationError", "InvalidInputError", "NonFiniteLossError", "NonFiniteValueError", "RolloutDivergenceError",
    "SimulationError", "SkillCompError", "ValidationError", "DiagGaussian", "gaussian_entropy",
    "kl_to_standard_normal", "sum_gaussians", "ModelConfig", "Trajectory", "init_parameters",
    "load_checkpoint", "save_checkpoint", "CompositionSpec", "ObjectiveConfig", "regularized_loss",
    "TrainConfig", "train", "train_one",
]
