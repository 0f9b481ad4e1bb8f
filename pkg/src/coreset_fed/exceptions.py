class CoresetFedError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CoresetFedError, ValueError):
    """Array shapes or lengths do not agree."""


class DomainError(CoresetFedError, ValueError):
    """An argument is outside the domain where the operation is defined."""


class ConfigError(CoresetFedError, ValueError):
    """An experiment configuration failed validation."""


class IDXParseError(CoresetFedError, ValueError):
    """Malformed IDX (MNIST-format) binary data.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
