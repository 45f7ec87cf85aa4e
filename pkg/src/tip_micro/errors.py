"""Exception types shared across the package."""


class TipError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TipError):
    """Invalid configuration value."""


class DatasetError(TipError):
    """Dataset generation or IO failure."""


class ParameterError(TipError):
    """Degradation parameter outside its valid range."""


class PromptParseError(TipError):
    """Restoration prompt does not match the grammar."""


class ModelError(TipError):
    """Shape or contract violation inside a model forward pass."""


class ScheduleError(TipError):
    """Timestep outside the noise schedule."""


class SamplerError(TipError):
    """Invalid sampler step or configuration."""


class FrozenParameterError(TipError):
    """Attempt to train or mutate frozen backbone parameters."""


class CheckpointError(TipError):
    """Missing or inconsistent checkpoint archive."""


class TrainingDivergedError(TipError):
    """Non-finite loss encountered during training."""
