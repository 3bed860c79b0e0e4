"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TpgoError(Exception):
    """Base class for all package errors."""


class ConfigError(TpgoError):
    """Run configuration is missing or invalid (CLI exit code 2)."""


class StorageError(TpgoError):
    """Archive or store read/write failed (CLI exit code 3)."""


class TransportError(TpgoError):
    """Provider call failed after exhausting retries.

    ``attempts`` counts every attempt made, including the first.
    """

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class ProviderRejectionError(TpgoError):
    """Provider rejected the request in a non-retryable way (4xx style)."""


class EmbeddingError(TpgoError):
    """Embedding provider returned an unusable vector (e.g. zero norm)."""


class SchemaError(TpgoError):
    """A document violated its schema; the message names the first violated rule."""


class GraphValidationError(SchemaError):
    """A prompt graph violated a structural invariant."""


class NodeNotFoundError(TpgoError):
    """A referenced node id does not exist in the graph."""


class GraphDiffError(TpgoError):
    """Two graphs differ in a way the edit vocabulary cannot express."""


class EditApplicationError(TpgoError):
    """A graph edit could not be applied; ``index`` locates it in the edit list.

    ``index`` is None when the failure is a whole-graph invariant detected
    after the last edit rather than a single offending edit.
    """

    def __init__(self, message: str, index: int | None):
        super().__init__(message)
        self.index = index


class ProposalApplicationError(TpgoError):
    """A proposal could not be applied atomically.

    ``modification_index`` points at the offending modification, or is None
    for a post-application invariant failure.
    """

    def __init__(self, message: str, modification_index: int | None):
        super().__init__(message)
        self.modification_index = modification_index


class CostReportError(TpgoError):
    """Cost amortization is undefined (zero trajectories)."""
