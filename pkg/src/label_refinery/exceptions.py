"""Exception hierarchy shared by every subsystem."""


class RefineryError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(RefineryError, ValueError):
    """An argument has the wrong shape, range or content."""


class DegenerateBatchError(InvalidInputError):
    """Batch statistics were requested on fewer than two samples."""


class ProtocolError(RefineryError, RuntimeError):
    """Calls were made in an order the object does not support."""


class ConfigError(RefineryError, ValueError):
    """An experiment or stage configuration is inconsistent."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)


class CheckpointError(RefineryError, IOError):
    """A persisted artifact could not be decoded."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
