"""Exceptions shared across modules."""
from __future__ import annotations

import numpy as np


class RegularityError(ArithmeticError):
    """A matrix that must be invertible is (numerically) singular."""

    def __init__(self, message: str, matrix=None, where=None):
        super().__init__(message)
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.where = where


class NonConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
