"""Exception types shared across the package."""


class AttnRegError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(AttnRegError, ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NonFiniteError(AttnRegError, FloatingPointError):
    """A computation produced NaN or Inf where finite values are required."""


class NonFiniteLossError(NonFiniteError):
    """Training loss became NaN/Inf; carries epoch/batch diagnostics."""

    def __init__(self, message, epoch=None, batch=None, loss=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class BadMagicError(AttnRegError, ValueError):
    """An IDX or checkpoint file does not start with the expected magic."""


class TruncatedFileError(AttnRegError, ValueError):
    """A binary file ends before its header-declared payload."""


class DimMismatchError(AttnRegError, ValueError):
    """An IDX file declares an unexpected number of dimensions."""


class EmptyDatasetError(AttnRegError, ValueError):
    """Pair sampling was requested from an empty dataset."""


class EmptyClassError(AttnRegError, ValueError):
    """Same-class pair sampling needs at least two members per class."""


class LengthMismatchError(AttnRegError, ValueError):
    """Parallel collections differ in length."""


class DegenerateSizeError(AttnRegError, ValueError):
    """An image dimension is too small for bilinear sampling (needs >= 2)."""
