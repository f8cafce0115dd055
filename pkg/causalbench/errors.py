"""Exception hierarchy for causalbench.

Every error carries a stable ``code`` so the CLI can print ``code:<CODE>`` lines
that scripts can grep for.
"""


class CausalBenchError(Exception):
    """Base class for all domain errors."""

    code = "CAUSALBENCH_ERROR"
    #: CLI exit status when the error escapes a command.
    exit_code = 1


class SchemaError(CausalBenchError):
    code = "SCHEMA_INVALID"


class MissingColumn(CausalBenchError):
    code = "MISSING_COLUMN"


class MissingData(CausalBenchError):
    code = "MISSING_DATA"


class NonBinaryTreatment(CausalBenchError):
    code = "NON_BINARY_TREATMENT"


class NaNCell(CausalBenchError):
    code = "NAN_CELL"


class UnknownCategoryLevel(CausalBenchError):
    code = "UNKNOWN_CATEGORY_LEVEL"


class EmptyArm(CausalBenchError):
    code = "EMPTY_ARM"


class TooFewUnits(CausalBenchError):
    code = "TOO_FEW_UNITS"


class ZeroDenominator(CausalBenchError):
    code = "ZERO_DENOMINATOR"


class DegenerateVariance(CausalBenchError):
    code = "DEGENERATE_VARIANCE"


class ConstantTreatment(CausalBenchError):
    code = "CONSTANT_TREATMENT"


class ArityMismatch(CausalBenchError):
    code = "ARITY_MISMATCH"


class ExtremePropensity(CausalBenchError):
    code = "EXTREME_PROPENSITY"


class EstimationError(CausalBenchError):
    """Failure while computing an estimate; the CLI exits with status 2."""

    code = "ESTIMATION_FAILED"
    exit_code = 2


class SingularCovariance(EstimationError):
    code = "SINGULAR_COVARIANCE"


class Infeasible(EstimationError):
    code = "INFEASIBLE"


class TooFewPairs(EstimationError):
    code = "TOO_FEW_PAIRS"


class RankDeficient(EstimationError):
    code = "RANK_DEFICIENT"


class DegenerateArm(EstimationError):
    code = "DEGENERATE_ARM"


class MethodFailure(EstimationError):
    code = "METHOD_FAILURE"


class NonzeroExit(EstimationError):
    code = "NONZERO_EXIT"


class ParseError(EstimationError):
    code = "PARSE_ERROR"


class Unachievable(CausalBenchError):
    code = "UNACHIEVABLE"

    def __init__(self, covariate: str, message: str | None = None) -> None:
        self.covariate = covariate
        super().__init__(
            message or f"Target std. diff. for '{covariate}' is not achievable"
        )


class ConfigError(CausalBenchError):
    """Invalid or missing run configuration.

    The code is chosen per instance: CONFIG_NOT_FOUND, CONFIG_INVALID or
    INPUT_NOT_FOUND.
    """

    code = "CONFIG_INVALID"

    def __init__(self, message: str, code: str = "CONFIG_INVALID") -> None:
        self.code = code
        super().__init__(message)


class SeparationWarning(UserWarning):
    """Logistic fit drifted towards perfect separation."""


class NumericalWarning(UserWarning):
    """A numerical repair (truncation, ridge, fallback) was applied."""
