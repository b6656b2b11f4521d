"""Exception taxonomy shared by all dmegp modules.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class DmegpError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DmegpError):
    """Invalid or inconsistent run configuration."""


class DimensionMismatch(DmegpError):
    """Operands whose shapes are incompatible with the operation."""


# Optimizer-facing alias: parameter/gradient shape disagreement.
ShapeMismatch = DimensionMismatch


class TraceMissing(DmegpError):
    """Backward pass requested on an embedding without its forward trace."""


class NumericError(DmegpError):
    """Numerical failure (factorization, divergence, non-finite values)."""


class NotPositiveDefinite(NumericError):
    """Cholesky factorization failed even at the maximum jitter level."""


class NewtonDivergence(NumericError):
    """Mode search for the latent posterior failed to converge."""


class InstanceTooLarge(DmegpError):
    """Joint-GP reference model invoked above its desk-scale size cap."""


class DataError(DmegpError):
    """Problem with input data files or cohorts."""


class EmptyCohort(DataError):
    """An operation that needs at least one patient received none."""


class SeriesTooShort(DataError):
    """Series has too few steps for the requested windowing."""


class MalformedRow(DataError):
    """CSV row that cannot be parsed; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class NonMonotonicTime(DataError):
    """Per-patient time indices are not strictly increasing."""

    def __init__(self, patient_id: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"patient {patient_id!r}: time_index not strictly increasing{detail}")
        self.patient_id = patient_id
