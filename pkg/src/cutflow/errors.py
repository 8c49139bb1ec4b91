"""Exception types raised across the package."""

from __future__ import annotations


class CutFlowError(Exception):
    """Base class for all package errors."""


class InvalidBoundary(CutFlowError):
    """Control points do not describe a valid closed boundary."""


class DomainEscape(CutFlowError):
    """The boundary left the background box (or violated its clearance)."""


class OutOfDomain(CutFlowError):
    """A field was evaluated outside the background box."""


class NonConvergence(CutFlowError):
    """An iterative solve stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class StepFailure(CutFlowError):
    """A time step of the flow failed; wraps the underlying error."""

    def __init__(self, step: int, cause: Exception, trace=None):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.trace = trace  # records of the steps completed before the failure
