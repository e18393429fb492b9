"""Exception hierarchy for the change-detection pipeline.

Every error class carries a distinct process exit code so the CLI can map
failures to something scriptable. Library callers just catch the classes.
"""

from __future__ import annotations

import numpy as np


class ChangeDetectError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class FormatError(ChangeDetectError):
    """Malformed header, map, config, or checkpoint manifest."""

    exit_code = 2


class SizeError(ChangeDetectError):
    """On-disk payload does not match the declared geometry."""

    exit_code = 3


class DataError(ChangeDetectError):
    """Values violate a data invariant (NaN/Inf, labels outside {0,1}, ...)."""

    exit_code = 4


class ShapeError(ChangeDetectError):
    """Array dimensions are inconsistent with each other or with a contract."""

    exit_code = 5


class DegeneracyError(ChangeDetectError):
    """A solver ran out of usable rank or produced an all-zero solution."""

    exit_code = 6


class ConvergenceError(ChangeDetectError):
    """Iteration cap exceeded. Carries the best iterate found so far."""

    exit_code = 7

    def __init__(self, message: str, best: np.ndarray | None = None):
        super().__init__(message)
        self.best = best


class CapacityError(ChangeDetectError):
    """A sample pool is too small to honor a requested count or ratio."""

    exit_code = 8


class DivergenceError(ChangeDetectError):
    """Training loss became non-finite. Carries the step index."""

    exit_code = 9

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NumericError(ChangeDetectError):
    """A numeric routine hit a non-finite intermediate value."""

    exit_code = 10
