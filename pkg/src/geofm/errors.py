"""Exceptions raised by the file readers and the training loop."""


class FileFormatError(Exception):
    """Base class for dataset / checkpoint decoding failures."""

    code = "format"


class CorruptHeaderError(FileFormatError):
    code = "corrupt_header"


class VersionMismatchError(FileFormatError):
    code = "version_mismatch"


class ShapeMismatchError(FileFormatError):
    code = "shape_mismatch"

    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class TruncatedBlobError(FileFormatError):
    code = "truncated"


class ChecksumError(FileFormatError):
    code = "checksum"


class NonFiniteError(RuntimeError):
    """A loss term or gradient became NaN/inf; carries what went wrong."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
