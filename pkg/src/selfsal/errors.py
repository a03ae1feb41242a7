"""Exception types shared across the package."""


class SelfSalError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SelfSalError):
    """A shape, size, or hyperparameter is inconsistent with the model setup."""


class DegenerateLogitsError(SelfSalError):
    """Image-level logits have (near-)zero norm; patch mining is undefined."""


class TrainingDivergenceError(SelfSalError):
    """A loss term became non-finite during training."""


class CorpusError(SelfSalError):
    """A dataset file is missing, unreadable, or inconsistently sized."""


class UsageError(SelfSalError):
    """Bad command line or config input (maps to exit code 2)."""
