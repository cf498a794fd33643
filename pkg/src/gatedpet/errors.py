"""Exception types shared across the package."""


class GatedPetError(Exception):
    """Base class for all package errors."""


class DomainError(GatedPetError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(GatedPetError):
    """A file on disk does not match the expected binary/text layout."""


class MissingArtifactError(GatedPetError):
    """A pipeline stage requires an artifact that does not exist yet."""


class NumericalAbort(GatedPetError):
    """Training produced a non-finite loss; run aborted with diagnostics."""
