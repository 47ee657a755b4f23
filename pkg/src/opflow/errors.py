"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
:class:`DataError` (and subclasses) exit 2, :class:`NumericError` exits 3.
"""

from __future__ import annotations


class OpflowError(Exception):
    """Base class for all package-specific errors."""


class DataError(OpflowError):
    """Invalid input data: malformed documents, bad references, bad formats."""


class DocumentError(DataError):
    """A workflow document failed validation.

    Carries the JSONPath-ish location of the offending field so callers can
    point at the exact spot in the file.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class CycleError(DataError):
    """A graph that must be acyclic contains a cycle.

    ``witness`` is a node sequence ``[a, b, ..., a]`` tracing the cycle.
    """

    def __init__(self, witness: list[str], message: str = "graph contains a cycle"):
        self.witness = list(witness)
        super().__init__(f"{message}: {' -> '.join(self.witness)}")


class MergeError(DataError):
    """Workflows could not be merged into a single operation graph."""


class NumericError(OpflowError):
    """Numerical failure: non-finite values, failed convergence checks."""
