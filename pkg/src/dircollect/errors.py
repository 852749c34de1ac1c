"""Exception types shared across the collector."""


class CollectorError(Exception):
    """Base class for all collector errors."""


class UnrecognizedDocument(CollectorError):
    """Input bytes do not start with any known document keyword."""


class MalformedDocument(CollectorError):
    """Document is structurally broken (truncated block, non-text line).

    Callers archive the bytes anyway; they only skip reference checking.
    """


class DigestRangeNotFound(CollectorError):
    """The token delimiting the digest byte range is absent."""


class MissingTimingField(CollectorError):
    """A consensus or vote lacks one of the required timing lines."""


class InvalidTimings(CollectorError):
    """Timing values violate the voting-period invariants."""


class WrongDocType(CollectorError):
    """Operation applied to a document type it does not accept."""


class FetchError(CollectorError):
    """Base class for download failures."""

    def __init__(self, message, server_id=None):
        super().__init__(message)
        self.server_id = server_id


class HttpError(FetchError):
    """Server answered with a non-success HTTP status."""

    def __init__(self, status, server_id=None):
        super().__init__(f"HTTP status {status}", server_id)
        self.status = status


class FetchTimeout(FetchError):
    """Request did not complete within the configured timeout."""


class TooLarge(FetchError):
    """Response body exceeded the size cap."""


class PermanentMiss(FetchError):
    """Resource is gone for good (HTTP 404/410); never re-request."""


class TransientError(FetchError):
    """Retryable failure (5xx, timeout) for scheduled re-attempts."""


class ArchiveError(CollectorError):
    """Base class for archive storage failures."""


class StorageFull(ArchiveError):
    """Filesystem has no space left."""


class CorruptEntry(ArchiveError):
    """Stored bytes no longer match the entry's recorded digest."""


class PluginInitError(CollectorError):
    """A plugin failed to initialize; other plugins keep running."""


class ConfigError(CollectorError):
    """Service configuration is missing or invalid."""
