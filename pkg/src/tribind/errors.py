"""Exception hierarchy shared across the package."""


class TribindError(Exception):
    """Base class for all errors raised by this package."""


class ZeroRowError(TribindError):
    """A row that must be normalizable has (near-)zero norm."""


class ShapeMismatchError(TribindError):
    """Operands have incompatible shapes."""


class NonFiniteError(TribindError):
    """An input or result contains NaN or Inf."""


class NormViolationError(TribindError):
    """An embedding row deviates from unit norm beyond tolerance."""


class IndexOutOfRangeError(TribindError):
    """A pair or row index points outside its matrix."""


class InvalidConfigError(TribindError):
    """A configuration value violates its declared invariants."""


class MissingFieldError(TribindError):
    """A required template or record field is absent."""


class SchemaVersionMismatchError(TribindError):
    """A persisted file has an unknown schema or version header."""


class UnknownTokenError(TribindError):
    """A token id is outside the model vocabulary."""


class EmptyGalleryError(TribindError):
    """Retrieval was asked to rank an empty gallery."""


class LengthMismatchError(TribindError):
    """Paired sequences (predictions / labels) differ in length."""


class InsufficientSamplesError(TribindError):
    """Not enough samples per class for the requested support size."""


class MissingClassSupportError(TribindError):
    """A class has no support examples for prototype construction."""


class MissingOutcomeError(TribindError):
    """Downstream training needs outcome labels that are absent."""


class NonFiniteLossError(TribindError):
    """Training produced a NaN/Inf loss; carries step diagnostics."""

    def __init__(self, message: str, step: int | None = None, batch_index: int | None = None):
        super().__init__(message)
        self.step = step
        self.batch_index = batch_index
