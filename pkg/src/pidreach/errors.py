"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each."""
from __future__ import annotations


class PidReachError(Exception):
    exit_code = 2


class InputError(PidReachError):
    """Bad user input: malformed model, unknown names, invalid arguments."""


class ModelParseError(InputError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None,
                 source: str | None = None):
        self.line, self.col, self.source = line, col, source
        where = f" (line {line}, column {col})" if line is not None else ""
        super().__init__(f"{message}{where}")


class ReservedName(InputError):
    pass


class AlgebraicLoop(InputError):
    pass


class NotComposed(InputError):
    pass


class OutOfDomain(InputError):
    pass


class DegenerateDimension(InputError):
    pass


class OutOfHorizon(InputError):
    pass


class UnsupportedGuard(InputError):
    pass


class DivisionByZeroInterval(PidReachError, ZeroDivisionError):
    exit_code = 3


class NumericFailure(PidReachError):
    exit_code = 3


class EnclosureBlowup(NumericFailure):
    pass


class NoConvergence(NumericFailure):
    pass


class GuardNeverFires(NumericFailure):
    pass


class BudgetExhausted(PidReachError):
    exit_code = 4


class PrecisionFloor(PidReachError):
    exit_code = 4


class NothingCertified(PidReachError):
    exit_code = 4
