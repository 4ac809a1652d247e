class FtkdError(Exception):
    """Base class for every error raised by ftkd."""


class ConfigurationError(FtkdError, ValueError):
    """Inconsistent or incomplete run configuration."""


class DegenerateInputError(FtkdError, ValueError):
    """Input that makes a quantity undefined, e.g. a zero-energy signal."""


class ShapeMismatchError(FtkdError, ValueError):
    """Tensors that must share a shape do not."""


class NonFiniteError(FtkdError, RuntimeError):
    """NaN or Inf appeared in an activation or a loss."""


class ModelFormatError(FtkdError, RuntimeError):
    """Model container is corrupt, of an unknown version, or does not fit the config."""


class PesqAdapterError(FtkdError, RuntimeError):
    """External PESQ adapter failed or printed something unparsable."""
