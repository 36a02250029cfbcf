"""Exception types raised by the library and mapped to exit codes by the CLI."""


class ShapeError(ValueError):
    """Tensor shapes do not agree; the message names the offending axes."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range."""


class UnsupportedModelError(TypeError):
    """The operation is not defined for this model family."""


class FileFormatError(ValueError):
    """A binary file (IDX or checkpoint) is malformed; the message names the byte offset."""


class IntegrityError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class InvalidInputError(ValueError):
    """Arguments are individually valid but inconsistent with each other."""


class NumericalAbort(RuntimeError):
    """Training was stopped because the numbers went bad or learning stalled."""
