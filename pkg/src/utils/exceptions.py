"""
Exception hierarchy shared by the solver modules and the command line entry point.
"""
from typing import Optional


class UnbsdeError(Exception):
    """Base class of every error raised on purpose by the package."""


class ConfigError(UnbsdeError):
    """Run configuration could not be parsed or failed validation."""


class ProblemError(UnbsdeError):
    """Benchmark lookup, parameter override or coefficient evaluation failed."""


class SchemeMismatchError(UnbsdeError):
    """A rollout scheme, bundle or loss does not fit the problem it is applied to."""


class NonFiniteError(UnbsdeError):
    """A surrogate input, loss value or gradient contained NaN or infinity."""


class ReferenceUnavailable(UnbsdeError):
    """No reference solution exists for the requested evaluation."""


class VerificationError(UnbsdeError):
    """Invalid input to a bias laboratory check."""


class TrainingAborted(UnbsdeError):
    """
    Raised by the training loop when an iteration produced a non-finite value.

    Parameters
    ----------
    iteration : int
        Index of the offending iteration.
    diagnostic : str
        Human readable description of the failure.
    record : optional
        The partially filled run record, so callers can still persist it.
    """

    def __init__(self, iteration: int, diagnostic: str, record: Optional[object] = None) -> None:
        super().__init__(f'training aborted at iteration {iteration}: {diagnostic}')
        self.iteration = iteration
        self.diagnostic = diagnostic
        self.record = record
