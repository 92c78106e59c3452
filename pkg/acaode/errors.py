"""
Error Types.

Every failure raised by acaode derives from AcaOdeError and carries a stable
upper-case ``code`` so that the harness can record it in result rows.
"""

from typing import Optional


class AcaOdeError(Exception):
    """Base class for all acaode errors.

    Attributes:
        code: Machine-readable error code (e.g. "STEP_UNDERFLOW").
    """
    code = "ACAODE_ERROR"


class DimensionMismatchError(AcaOdeError, ValueError):
    """Raised when array dimensions disagree with a declared layout."""
    code = "DIMENSION_MISMATCH"


class NonFiniteStateError(AcaOdeError, ArithmeticError):
    """Raised when a stage or state contains NaN or Inf.

    Attributes:
        t: Integration time at which the non-finite value appeared.
    """
    code = "NONFINITE_STATE"

    def __init__(self, message: str, t: Optional[float] = None):
        super().__init__(message)
        self.t = t


class CollinearSingularityError(AcaOdeError, ArithmeticError):
    """Raised when two bodies come closer than the configured minimum distance.

    Attributes:
        pair: Indices (i, j) of the offending bodies.
        distance: Their separation.
    """
    code = "COLLINEAR_SINGULARITY"

    def __init__(self, pair: tuple, distance: float):
        super().__init__(f"Bodies {pair[0]} and {pair[1]} are {distance:.3e} apart")
        self.pair = pair
        self.distance = distance


class StepUnderflowError(AcaOdeError, RuntimeError):
    """Raised when the step-size controller proposes a step below h_min.

    Attributes:
        h: The rejected proposal.
        h_min: The floor it fell below.
        t: Start time of the step that could not be completed, when known.
    """
    code = "STEP_UNDERFLOW"

    def __init__(self, h: float, h_min: float, t: Optional[float] = None):
        where = "" if t is None else f" at t={t:.6g}"
        super().__init__(f"Step size {h:.3e} fell below h_min={h_min:.3e}{where}")
        self.h = h
        self.h_min = h_min
        self.t = t


class MaxStepsExceededError(AcaOdeError, RuntimeError):
    """Raised when an integration needs more accepted steps than allowed."""
    code = "MAX_STEPS_EXCEEDED"


class MaxRejectsExceededError(AcaOdeError, RuntimeError):
    """Raised when a single step is rejected too many times.

    Attributes:
        t: Time of the step that could not be completed.
    """
    code = "MAX_REJECTS_EXCEEDED"

    def __init__(self, message: str, t: Optional[float] = None):
        super().__init__(message)
        self.t = t


class CacheMismatchError(AcaOdeError, RuntimeError):
    """Raised when an ACA replay of a checkpointed step differs from the cached state.

    Attributes:
        index: Index of the accepted step whose replay disagreed.
    """
    code = "CACHE_MISMATCH"

    def __init__(self, index: int):
        super().__init__(f"Replay of checkpointed step {index} does not reproduce the cached state")
        self.index = index


class TapeOverflowError(AcaOdeError, MemoryError):
    """Raised when the naive method's tape grows past its node budget.

    Attributes:
        budget: The configured maximum number of nodes.
    """
    code = "TAPE_OVERFLOW"

    def __init__(self, budget: int):
        super().__init__(f"Solver tape exceeded its budget of {budget} nodes")
        self.budget = budget


class UnknownMethodError(AcaOdeError, ValueError):
    """Raised for an unrecognised gradient method name."""
    code = "UNKNOWN_METHOD"


class DivergedError(AcaOdeError, RuntimeError):
    """Raised when a fit produces a non-finite loss or an integration segment fails.

    Attributes:
        epoch: Epoch index, if raised during fitting.
        interval: (t_start, t_end) of the failing segment, if known.
    """
    code = "DIVERGED"

    def __init__(self, message: str, epoch: Optional[int] = None, interval: Optional[tuple] = None):
        super().__init__(message)
        self.epoch = epoch
        self.interval = interval


class NonFiniteLossError(AcaOdeError, ArithmeticError):
    """Raised when a finite-difference probe of a loss is not finite."""
    code = "NONFINITE_LOSS"


class DegenerateFitError(AcaOdeError, ValueError):
    """Raised when a log-log slope cannot be fitted (errors at round-off level)."""
    code = "DEGENERATE_FIT"
