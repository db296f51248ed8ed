# core/errors.py
from typing import Optional


class SdeError(Exception):
    """Root of every error raised by the estimation engine"""


class InputError(SdeError):
    """Rejected input: bad data, missing columns, invalid geometry"""


class ConfigError(InputError):
    """Invalid model or run configuration"""


class ArtifactError(InputError):
    """Missing, unreadable or version-mismatched fit artifact"""


class ConvergenceError(SdeError):
    """An optimizer ran out of iterations"""


class InnerConvergenceError(ConvergenceError):
    """Newton iteration for the random coefficients did not converge"""


class NumericalError(SdeError):
    """Singular or indefinite matrices where a factorization was required"""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"{message} (at row {index})")
        self.index = index


# ───────────── warning categories ─────────────
class ExtrapolationWarning(UserWarning):
    pass


class DegenerateWarning(UserWarning):
    pass


class NumericalWarning(RuntimeWarning):
    pass


EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERICAL = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_BAD_INPUT
    if isinstance(exc, ConvergenceError):
        return EXIT_NOT_CONVERGED
    return EXIT_NUMERICAL
