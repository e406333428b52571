"""Exception hierarchy shared across the package.

Everything user-facing derives from ConeflowError so the CLI can map
failures onto exit codes without pattern-matching on messages.
"""

from __future__ import annotations


class ConeflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ConeflowError, ValueError):
    """Invalid user input: bad resolution, out-of-range parameter, unknown key."""


class CompatibilityError(ConeflowError, ValueError):
    """An integral compatibility condition failed (solvability obstruction)."""


class PositivityError(ConeflowError, RuntimeError):
    """A metric density that must stay positive did not.

    ``nodes`` holds (i, j) index pairs of the offending grid nodes, capped
    at a small count so messages stay readable.
    """

    def __init__(self, message: str, nodes=None):
        super().__init__(message)
        self.nodes = list(nodes) if nodes is not None else []


class SolverError(ConeflowError, RuntimeError):
    """An iterative solve stagnated or diverged.

    ``residual_history`` records the max-norm residual per iteration.
    """

    def __init__(self, message: str, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history) if residual_history is not None else []


class ArchiveError(ConeflowError, ValueError):
    """A run archive is missing, incomplete, or fails its integrity check."""
