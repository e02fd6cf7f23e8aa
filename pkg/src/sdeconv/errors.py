"""Exception hierarchy shared by every module."""

from __future__ import annotations


class SDEConvError(Exception):
    """Base class for all library errors."""


class ArgumentError(SDEConvError, ValueError):
    """An argument violates a documented precondition."""


class DomainError(SDEConvError, ValueError):
    """A state lies outside the model's domain."""


class DomainEscapeError(DomainError):
    """An implicit solve produced a state outside the model's domain."""


class CapabilityError(SDEConvError):
    """A model lacks every route needed to evaluate a quantity."""


class SolveError(SDEConvError, RuntimeError):
    """An implicit equation could not be solved to tolerance.

    The partially filled :class:`~sdeconv.schemes.ImplicitSolveReport` is kept
    on ``report`` so callers can inspect the last iterate.
    """

    def __init__(self, message: str, report=None, sample_id: int | None = None,
                 step_index: int | None = None):
        super().__init__(message)
        self.report = report
        self.sample_id = sample_id
        self.step_index = step_index
