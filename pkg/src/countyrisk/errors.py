"""Exception and warning types shared across the package.

Exit-code mapping for the CLI: InputError -> 2, NumericalError -> 3,
MissingStageError -> 4.
"""


class CountyRiskError(Exception):
    """Base class for all package errors."""


class InputError(CountyRiskError):
    """Bad input data or configuration (CLI exit code 2)."""


class NonNumericFipsError(InputError):
    """FIPS code contains non-digit characters."""


class FipsLengthError(InputError):
    """FIPS code is empty or longer than five characters."""


class SchemaMismatchError(InputError):
    """Source file header does not match the declared schema."""


class DuplicateFipsError(InputError):
    """The same FIPS code appears twice within one source file."""


class CellParseError(InputError):
    """A cell could not be parsed as a number (row number in message)."""


class EmptyJoinError(InputError):
    """No mortality county matches any predictor source."""


class ColumnMismatchError(InputError):
    """Feature columns do not match the model's feature schema."""


class NumericalError(CountyRiskError):
    """A computation is undefined on the given data (CLI exit code 3)."""


class ZeroVarianceError(NumericalError):
    """An operation requires nonzero variance and the data is constant."""


class ZeroExpectedDeathsError(NumericalError):
    """SMR denominator (population x rate / 100k) is zero."""


class FullyMissingColumnError(NumericalError):
    """A feature column has no observed values to take a median of."""


class NoObservedRecordsError(NumericalError):
    """No county has an observed (non-suppressed) death count."""


class NoHighRiskCountiesError(NumericalError):
    """High-risk recall is undefined: no county has outcome above 1.0."""


class EmptyGroupError(NumericalError):
    """A two-group comparison received an empty group."""


class SingularDesignError(NumericalError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, message, collinear=()):
        super().__init__(message)
        self.collinear = tuple(collinear)


class MalformedModelError(NumericalError):
    """A tree model violates a structural invariant (e.g. zero cover)."""


class MissingStageError(CountyRiskError):
    """A pipeline stage requires outputs of a stage that has not run (exit 4)."""


class ZeroRateWarning(UserWarning):
    """Pooled reference rate is zero (no deaths among observed counties)."""


class DegenerateTestWarning(UserWarning):
    """A statistical test was degenerate (e.g. both samples constant)."""


class DroppedColumnWarning(UserWarning):
    """A zero-variance column was dropped before fitting."""


class IsolatedCountyWarning(UserWarning):
    """Counties without neighbors were excluded from a spatial statistic."""
