"""Exception hierarchy shared by every stage of the pipeline."""


class TradeCausalError(Exception):
    """Base class for all package errors."""


class IngestError(TradeCausalError, ValueError):
    """Raised when a CSV or schema file cannot be turned into a Dataset."""


class MissingColumn(IngestError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing column {column!r}")


class UnparseableValue(IngestError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class UnknownCategory(IngestError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}, column {column!r}: unknown category {value!r}")


class ZeroVariance(TradeCausalError, ValueError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} has zero variance")


class OneClassOnly(TradeCausalError, ValueError):
    """Only one label class is present where both are required."""


class KTooLarge(TradeCausalError, ValueError):
    pass


class SchemaMismatch(TradeCausalError, ValueError):
    pass


class LengthMismatch(TradeCausalError, ValueError):
    pass


class TooManyFeatures(TradeCausalError, ValueError):
    def __init__(self, d, cap):
        self.d, self.cap = d, cap
        super().__init__(f"{d} features exceeds the exact-enumeration cap of {cap}")


class UnrankedFeature(TradeCausalError, KeyError):
    pass


class TooFewRows(TradeCausalError, ValueError):
    pass


class DegenerateArm(TradeCausalError, ValueError):
    """A treatment assignment leaves one arm empty."""


class ArmTooSmall(TradeCausalError, ValueError):
    pass


class PropensityOutOfRange(TradeCausalError, ValueError):
    pass


class InvalidSpec(TradeCausalError, ValueError):
    pass


class UnknownTreatment(TradeCausalError, KeyError):
    pass


class EmptyMatrix(TradeCausalError, ValueError):
    pass


class MissingInput(TradeCausalError, FileNotFoundError):
    def __init__(self, stage, path):
        self.stage, self.path = stage, path
        super().__init__(f"stage {stage!r} requires {path}")


class StageFailure(TradeCausalError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage, self.cause = stage, cause
        super().__init__(f"stage {stage!r} failed: {cause}")
