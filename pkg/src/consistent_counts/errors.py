"""Exception types raised across the package."""


class CountsError(Exception):
    """Base class for all errors raised by consistent_counts."""


class SchemaError(CountsError):
    """Invalid schema, or objects built against different schemas."""


class MarginMismatchError(CountsError):
    """A margin operation was asked to relate incompatible variable sets."""


class StructureError(CountsError):
    """A set of margins or a vector does not have the required structure."""


class ConflictError(CountsError):
    """Two tables ended up describing the same margin."""

    def __init__(self, message: str, colliding=()):
        super().__init__(message)
        self.colliding = tuple(colliding)


class UnreachableMarginError(CountsError):
    """A desired margin has no observed table above it."""

    def __init__(self, message: str, margins=()):
        super().__init__(message)
        self.margins = tuple(margins)


class IncompleteMarginsError(StructureError):
    """A required submargin was not supplied."""


class AssumptionError(CountsError):
    """A verifiable noise assumption does not hold for the given input."""


class MethodAssumptionError(AssumptionError):
    """The requested method is not valid under the declared noise model."""


class ParameterError(CountsError, ValueError):
    """An argument is outside its documented range."""


class NumericError(CountsError):
    """A covariance input is not usable (not positive definite, non-finite, ...)."""


class ParseError(CountsError):
    """An input file is malformed; carries the offending line when known."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        prefix = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(prefix + message)
        self.path = path
        self.line = line


class SizeGuardError(CountsError):
    """A dense computation would exceed its configured allocation cap."""

    def __init__(self, message: str, required_bytes: int = 0, cap_bytes: int = 0):
        super().__init__(message)
        self.required_bytes = required_bytes
        self.cap_bytes = cap_bytes
