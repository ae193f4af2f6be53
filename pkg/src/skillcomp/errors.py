"""Exception types shared across the package."""


class SkillCompError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SkillCompError, ValueError):
    """An argument violates a shape, finiteness or positivity requirement."""


class NonFiniteValueError(InvalidInputError):
    """A distribution parameter or tensor came out NaN/Inf."""


class ConfigurationError(SkillCompError):
    """A requested operation is not supported by the current configuration."""


class ValidationError(SkillCompError, ValueError):
    """A manifest, dataset or metrics file is internally inconsistent."""


class SimulationError(SkillCompError):
    """The synthetic simulator produced a non-finite value."""


class RolloutDivergenceError(SkillCompError):
    """Free-running generation produced a non-finite state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"rollout produced a non-finite state at step {step}")


class NonFiniteLossError(SkillCompError):
    """Training hit a NaN/Inf loss; carries the offending epoch, batch and components."""

    def __init__(self, epoch, batch, components):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components)
        detail = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
