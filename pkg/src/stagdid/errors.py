"""Exception types raised across the package.

Every error that callers are expected to catch has its own class so the
CLI can map failures onto stable machine-readable records and exit codes.
"""


class StagdidError(Exception):
    """Base class for all package-specific errors."""


# --- panel construction / selection ---------------------------------------


class ConflictingGroupError(StagdidError):
    """Same unit reported with two different adoption periods."""


class NonIntegerPeriodError(StagdidError):
    """A period label could not be read as an integer."""


class DuplicateCellError(StagdidError):
    """The same (unit, period, column) cell appears twice with different values."""


class UnmappedUnitError(StagdidError):
    """A panel unit is missing from the aggregation mapping."""


class NonpositiveValueError(StagdidError):
    """Log transform requested on a column containing values <= 0."""

    def __init__(self, outcome, unit, period):
        self.outcome = outcome
        self.unit = unit
        self.period = period
        super().__init__(
            f"outcome {outcome!r} is not strictly positive at unit={unit!r}, period={period}"
        )


# --- propensity / cell estimation ------------------------------------------


class SeparationError(StagdidError):
    """Logistic likelihood is unbounded: a covariate perfectly predicts the label."""


class CollinearError(StagdidError):
    """Design matrix is numerically singular (reciprocal condition < 1e-12)."""


class InsufficientGroupError(StagdidError):
    """Fewer treated units in the cell than min_group_size."""


class NoComparisonError(StagdidError):
    """No never-treated unit available for the contrast."""


class TrimmedError(StagdidError):
    """Every comparison unit exceeds the propensity trim threshold."""


# --- aggregation / inference ------------------------------------------------


class EmptyTableError(StagdidError):
    """Aggregation requested on a table without any feasible post cell."""


class TooFewDrawsError(StagdidError):
    """Bootstrap band computation requires at least 100 draws."""


class NoPlaceboCellsError(StagdidError):
    """Pre-trend test requested but the table has no placebo cells."""


class DegenerateInfluenceWarning(UserWarning):
    """All influence values are zero; bands collapse to the point estimate."""


# --- cost-benefit -------------------------------------------------------------


class EmptyYearError(StagdidError):
    """No treated-unit rows present for a requested year."""


class MissingPriceIndexError(StagdidError):
    """Price index level not available for a required year."""

    def __init__(self, year):
        self.year = year
        super().__init__(f"price index has no level for year {year}")


class MissingPopulationError(StagdidError):
    """Population required but absent."""


class ZeroCostError(StagdidError):
    """Break-even ratio undefined: time-average cost is zero."""


# --- synthetic data -----------------------------------------------------------


class InvalidSharesError(StagdidError):
    """Group shares do not form a probability distribution."""


class EmptyCellError(StagdidError):
    """Brute-force contrast requested on an empty group/period cell."""
