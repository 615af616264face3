"""Exception hierarchy shared across the pipeline."""


class EvidexError(Exception):
    """Base class for all pipeline errors."""


class SchemaParseError(EvidexError):
    """A schema or document record does not conform to its file format."""


class SchemaValidationError(EvidexError):
    """A structurally well-formed record violates an invariant (e.g. duplicate ids)."""


class DocumentError(EvidexError):
    """A parsed-document record is malformed or internally inconsistent."""


class PageRangeError(EvidexError, IndexError):
    """Requested page is outside 1..n_pages."""


class ProviderError(EvidexError):
    """An embedding provider call failed; retryable.

    ``batch_range`` holds the (start, end) slice of the input list that failed,
    so callers can retry just that batch.
    """

    def __init__(self, message: str, batch_range: tuple[int, int] | None = None):
        super().__init__(message)
        self.batch_range = batch_range
        self.retryable = True


class TransportError(EvidexError):
    """A model backend call failed at the transport level; retryable."""


class OutputValidationError(EvidexError):
    """Model output did not validate against the declared schema or tool set.

    Carries the raw output so the caller can append it (with this error) to a
    retry request.
    """

    def __init__(self, message: str, raw_output=None):
        super().__init__(message)
        self.raw_output = raw_output


class HardFailure(EvidexError):
    """Retries exhausted; the affected columns must degrade to the failed sentinel."""


class StoreError(EvidexError):
    """Persistence-layer failure (validation before write, unknown ids, ...)."""


class CellNotFoundError(StoreError, KeyError):
    """Review action addressed a cell that does not exist."""


class ReviewActionError(StoreError, ValueError):
    """Review action payload is invalid (e.g. correction with empty value)."""
