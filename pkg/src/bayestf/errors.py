"""Exception types raised by bayestf."""

import numpy as np


class BayesTFError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(BayesTFError, ValueError):
    """An argument violates a documented precondition (shape, range, sign)."""


class NumericalError(BayesTFError, ArithmeticError):
    """A numerical routine produced NaN/inf or lost positive definiteness."""


class ConvergenceError(BayesTFError):
    """Conjugate gradient did not reach tolerance within the iteration cap.

    ``residuals`` holds the final residual 2-norm of every right-hand side
    column (converged columns included).
    """

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = np.asarray(residuals, dtype=float)


class FormatError(BayesTFError, ValueError):
    """An input file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
