"""Exceptions raised across the lab.

Input problems subclass ValueError, numeric breakdowns subclass RuntimeError,
so callers can keep catching the builtin families.
"""


class LabError(Exception):
    """Base class for every error raised by this package."""


class DomainError(LabError, ValueError):
    pass


class OrderingError(LabError, ValueError):
    pass


class DimensionMismatchError(LabError, ValueError):
    pass


class SingularSigmaError(LabError, ValueError):
    pass


class InfeasibleClampError(LabError, ValueError):
    pass


class TableLookupError(LabError, ValueError):
    pass


class IncompleteTableError(LabError, ValueError):
    def __init__(self, gaps: list[tuple[str, int, int]]):
        self.gaps = gaps
        shown = ", ".join(f"({c}, t={t}, d={d})" for c, t, d in gaps[:20])
        more = f" and {len(gaps) - 20} more" if len(gaps) > 20 else ""
        super().__init__(f"prediction cache is missing {len(gaps)} cell(s): {shown}{more}")


class CacheValidationError(LabError, ValueError):
    pass


class TableFormatError(LabError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class SchemaVersionError(LabError, ValueError):
    pass


class ConfigError(LabError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericFailureError(LabError, RuntimeError):
    def __init__(self, message: str, step: int | None = None, t: float | None = None):
        self.step = step
        self.t = t
        if step is not None:
            message = f"{message} at step {step} (t={t!r})"
        super().__init__(message)


class QuadratureError(LabError, RuntimeError):
    def __init__(self, message: str, abserr: float):
        self.abserr = abserr
        super().__init__(f"{message} (achieved error estimate {abserr:.3e})")


class InvariantFailure(LabError, RuntimeError):
    pass
