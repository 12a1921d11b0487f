"""Exception types shared across the package."""


class FedrecError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(FedrecError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class NumericError(FedrecError, ValueError):
    """Non-finite values where finite input is required."""


class EmbeddingIndexError(FedrecError, IndexError):
    """An id falls outside the embedding table."""


class DegenerateInputError(FedrecError, ValueError):
    """Input is structurally valid but semantically empty (e.g. all-padding)."""


class ContractError(FedrecError, ValueError):
    """A caller violated an operation's precondition."""


class MetricUndefinedError(FedrecError, ValueError):
    """The requested metric is undefined for this input (e.g. single-class AUC)."""


class DataLoadError(FedrecError, ValueError):
    """An interaction file failed validation; the message carries the line number."""


class ConfigError(FedrecError, ValueError):
    """An experiment config failed validation."""


class DivergenceError(FedrecError, RuntimeError):
    """Training produced a non-finite loss; names the round and client."""
