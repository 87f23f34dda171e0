"""Exception hierarchy.

Everything derives from :class:`SemSplatError` so the CLI can map failures to
exit codes: validation-type errors exit 2, runtime failures exit 3.
"""


class SemSplatError(Exception):
    pass


class ValidationError(SemSplatError, ValueError):
    pass


class FormatError(SemSplatError, ValueError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class NumericalError(SemSplatError, ArithmeticError):
    pass


class EmptyInitError(SemSplatError):
    pass


class DegenerateRayError(SemSplatError, ValueError):
    pass


class InsufficientMatchesError(SemSplatError):
    pass


class DegenerateGeometryError(SemSplatError):
    pass


class EmptyLiftError(SemSplatError):
    pass


class EmptyBankError(SemSplatError):
    pass


class InsufficientDataError(SemSplatError, ValueError):
    pass


class RunFailedError(SemSplatError, RuntimeError):
    pass


VALIDATION_ERRORS = (ValidationError, FormatError, InsufficientDataError)
