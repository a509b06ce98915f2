"""Exception types shared across the toolkit."""


class TernlmError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(TernlmError):
    """Input violates a documented precondition (bad values, non-finite entries)."""


class DimensionError(TernlmError):
    """Shapes or lengths are inconsistent with each other or with a contract."""


class ModelFormatError(TernlmError):
    """Base class for model-file problems."""


class BadMagicError(ModelFormatError):
    """The stream does not start with the expected magic bytes."""


class UnsupportedVersionError(ModelFormatError):
    """The file declares a format version this reader does not understand."""


class TruncatedFileError(ModelFormatError):
    """The stream ended before a declared segment was fully read."""


class DuplicateTensorError(ModelFormatError):
    """Two tensor records share a name."""


class CorruptDataError(ModelFormatError):
    """A packed ternary payload contains the reserved 0b11 field or bad padding."""


class TrainingDivergedError(TernlmError):
    """The training loss became non-finite; carries step diagnostics in the message."""
