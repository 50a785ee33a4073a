"""Exception types shared across the package."""


class RecoError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(RecoError, ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(RecoError, FloatingPointError):
    """A computation produced NaN or Inf."""


class FormatError(RecoError, ValueError):
    """A persisted file is malformed, truncated, or fails its checksum."""


class EmptyStoreError(RecoError, ValueError):
    """An operation would leave a memory store with no entries."""


class DegenerateFusionError(RecoError, ValueError):
    """Mean fusion collapsed to the zero vector."""


class DivergenceError(RecoError, RuntimeError):
    """Training loss stayed non-finite for too many consecutive steps."""


class ConfigError(RecoError, ValueError):
    """Invalid configuration values."""
