"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DatasetError -> 3,
NumericError -> 4, VerificationError -> 5.
"""


class ProtofuseError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtofuseError):
    """Invalid configuration or invalid invocation arguments."""


class DatasetError(ProtofuseError):
    """Problems with dataset files, manifests, or their contents."""


class EmbeddingFormatError(DatasetError):
    """Base class for malformed embedding files."""


class BadMagicError(EmbeddingFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(EmbeddingFormatError):
    """File declares a format version this package cannot read."""


class TruncatedPayloadError(EmbeddingFormatError):
    """Payload size disagrees with the rows/cols declared in the header."""


class NonFiniteDataError(EmbeddingFormatError):
    """Embedding payload contains NaN or Inf values."""


class EmptyShapeError(EmbeddingFormatError):
    """Header declares zero rows or zero columns."""


class ManifestError(DatasetError):
    """Manifest fails schema or consistency checks."""


class NumericError(ProtofuseError):
    """Non-finite loss or other numeric failure during training."""


class VerificationError(ProtofuseError):
    """A verification harness (e.g. gradient checking) found a violation."""
