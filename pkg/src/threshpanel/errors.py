"""Exception hierarchy.

Every error raised by the library derives from :class:`ThreshPanelError`.
The three intermediate classes map onto the CLI exit codes: configuration
problems (2), data problems (3) and estimation failures (4).
"""

from __future__ import annotations


class ThreshPanelError(Exception):
    """Base class for library errors."""

    exit_code = 1


class ConfigError(ThreshPanelError):
    """Invalid or inconsistent configuration.

    Parameters
    ----------
    message : str
        Human readable description.
    field : str, optional
        Dotted path of the offending configuration field.
    """

    exit_code = 2

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DataError(ThreshPanelError):
    exit_code = 3


class EstimationError(ThreshPanelError):
    exit_code = 4


# -- panel ingest / filtering ------------------------------------------------


class MissingColumn(DataError):
    pass


class DuplicateKey(DataError):
    pass


class ParseError(DataError):
    """One or more rows could not be parsed.

    ``diagnostics`` holds ``(row_index, message)`` pairs, where ``row_index``
    is the zero-based data row (header excluded).
    """

    def __init__(self, message: str, diagnostics: list[tuple[int, str]] | None = None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            shown = "; ".join(f"row {i}: {m}" for i, m in self.diagnostics[:5])
            more = len(self.diagnostics) - 5
            if more > 0:
                shown += f"; ... ({more} more)"
            message = f"{message}: {shown}"
        super().__init__(message)


class EmptySample(DataError):
    pass


class UnknownVariable(DataError):
    pass


# -- design ------------------------------------------------------------------


class NonPositiveScale(DataError):
    pass


class UnknownFactorLabel(DataError):
    pass


class RankDeficientBeyondRepair(EstimationError):
    """The piecewise terms are collinear with the rest of the design."""


# -- estimators ---------------------------------------------------------------


class SingularDesign(EstimationError):
    pass


class TooFewClusters(EstimationError):
    pass


class SeparationDetected(EstimationError):
    pass


class InvalidDof(EstimationError):
    pass


# -- search / hetero -----------------------------------------------------------


class NoValidCandidates(EstimationError):
    pass


class AllCandidatesInvalid(EstimationError):
    pass


class InsufficientDistinctValues(DataError):
    pass


class TooFewRowsPerBin(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


class NonConvergence(EstimationError):
    """IRLS hit its iteration cap. Fits report this via ``converged=False``."""
