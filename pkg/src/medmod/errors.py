"""Exception types raised across the package."""


class MedModError(Exception):
    """Base class for all package errors."""


class UnknownColumn(MedModError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidData(MedModError, ValueError):
    """Non-finite values, ragged columns or duplicate names."""


class FormulaError(MedModError, ValueError):
    pass


class RankDeficient(MedModError):
    """The design matrix does not have full column rank.

    ``equation`` is filled in by callers that fit named equations so the
    failing one can be reported.
    """

    def __init__(self, message, equation=None):
        super().__init__(message)
        self.equation = equation

    def __str__(self):
        msg = super().__str__()
        if self.equation is not None:
            return f"{self.equation}: {msg}"
        return msg


class TooFewRows(MedModError):
    pass


class InvalidDf(MedModError, ValueError):
    pass


class MissingTerm(MedModError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NonPSDCorrelation(MedModError, ValueError):
    pass


class NotPositiveDefinite(MedModError, ValueError):
    pass


class DimensionMismatch(MedModError, ValueError):
    pass


class SingularImplied(MedModError):
    """The model-implied covariance matrix is not positive definite."""


class NonConvergence(MedModError):
    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class ZeroDf(MedModError, ValueError):
    pass
