"""Exception types shared across the package.

Every error raised on purpose derives from LgalError so callers can
catch the package's failures without also swallowing programming
mistakes. Errors that occur partway through a long computation carry
whatever partial result is safe to hand back.
"""

from __future__ import annotations


class LgalError(Exception):
    """Base class for all errors raised deliberately by this package."""


class InvalidArgumentError(LgalError):
    """An argument violates a documented precondition (shape, range, name)."""


class NumericalError(LgalError):
    """A computation produced non-finite values or an ill-posed quantity."""


class ParseError(LgalError):
    """A file could not be parsed; message includes the offending location."""


class DegenerateCentersError(LgalError):
    """Center construction failed: too few distinct points or zero spread."""


class CalibrationFailedError(LgalError):
    """Bandwidth-scale calibration found no sign change in its bracket."""


class TrainingDivergedError(LgalError):
    """The training objective became non-finite.

    Attributes
    ----------
    step : int
        Global optimizer step at which divergence was detected.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class GeodesicFailedError(LgalError):
    """Curve optimization diverged.

    Attributes
    ----------
    best_curve : DiscretizedCurve or None
        Best iterate found before the failure, if any.
    """

    def __init__(self, message: str, best_curve=None):
        super().__init__(message)
        self.best_curve = best_curve


class BudgetExhaustedError(LgalError):
    """An oracle ran out of queries (or a pool ran dry) mid-loop.

    Attributes
    ----------
    records : list
        Records for the iterations completed before exhaustion.
    """

    def __init__(self, message: str, records=None):
        super().__init__(message)
        self.records = list(records) if records is not None else []
