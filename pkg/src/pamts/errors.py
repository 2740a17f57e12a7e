"""Exception types shared across the package."""


class PamtsError(Exception):
    """Base class for all package errors."""


class IngestionError(PamtsError):
    """A data file could not be parsed (message names the offending row)."""


class OrderingError(PamtsError):
    """Timestamps are not strictly increasing."""


class EmptyDatasetError(PamtsError):
    """Series too short to host a single window."""


class EmptySplitError(PamtsError):
    """A chronological split is too short to host a window."""


class ConfigurationError(PamtsError):
    """Invalid configuration value or combination."""


class FormatError(PamtsError):
    """A file does not conform to its declared schema."""


class ShapeError(PamtsError):
    """Operands with incompatible shapes (message names both)."""


class NonFiniteError(PamtsError):
    """NaN or Inf appeared in a computation; treated as a hard fault."""


class ContractError(PamtsError):
    """A caller violated an operation's precondition."""


class CertificationError(PamtsError):
    """A robustness bound could not be computed."""


class EstimationError(PamtsError):
    """An iterative estimator failed to converge."""


class TrainingAbort(PamtsError):
    """Training stopped on a fault (message names the offending batch)."""
