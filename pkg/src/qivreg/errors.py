"""Exception hierarchy shared by all qivreg modules.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented exit statuses (2 = validation, 3 = numerical, 4 = I/O).
"""


class QivregError(Exception):
    """Base class for all qivreg errors."""

    exit_code = 3


class ValidationError(QivregError):
    """Bad inputs: malformed files, out-of-range parameters, schema violations."""

    exit_code = 2


class NumericalError(QivregError):
    """A numerical precondition failed during estimation."""

    exit_code = 3


class InputOutputError(QivregError):
    """Filesystem-level failure while reading or writing run artifacts."""

    exit_code = 4


class ZeroVarianceColumn(ValidationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column} has zero sample variance")


class EmptySelection(ValidationError):
    pass


class FullSelection(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class IncompatibleDimensions(ValidationError):
    pass


class ZeroSignal(ValidationError):
    pass


class MissingUStarColumns(ValidationError):
    pass


class SolverDidNotConverge(NumericalError):
    def __init__(self, iterations, message=""):
        self.iterations = iterations
        super().__init__(message or f"LP solver stopped after {iterations} iterations without a certificate")


class DegenerateSchurComplement(NumericalError):
    pass


class ZeroMatrix(NumericalError):
    pass


class DegenerateGram(NumericalError):
    pass


class SingularResidualGram(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class AllBandwidthsDegenerate(NumericalError):
    pass


class QivregWarning(UserWarning):
    """Non-fatal pipeline events recorded in run manifests."""
