"""Exception types shared across the package."""


class LtCausalError(Exception):
    """Base class for all package errors."""


class ParameterError(LtCausalError, ValueError):
    """An argument violates a documented precondition."""


class IngestionError(LtCausalError):
    """An external dataset folder does not match its manifest."""


class DataError(LtCausalError):
    """A dataset is structurally unusable (empty class, bad label, ...)."""


class EmptyDictionaryError(LtCausalError):
    """No usable masks were found when building the confounder dictionary."""


class UnsupportedModelError(LtCausalError):
    """The model cannot provide input gradients for saliency masking."""


class ConfigurationError(LtCausalError):
    """A run configuration is inconsistent (missing dictionary, bad toggle combo)."""


class StateError(LtCausalError):
    """An operation requires trained/loaded state that is not available."""


class TrainingDiverged(LtCausalError, RuntimeError):
    """A loss became non-finite during optimization."""
