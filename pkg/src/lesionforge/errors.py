"""Exception hierarchy shared by all modules.

Every error carries a short ``kind`` string so the CLI can emit a
machine-readable error line without inspecting class names.
"""


class LesionForgeError(Exception):
    kind = "error"
    exit_code = 1


class ParameterError(LesionForgeError, ValueError):
    kind = "parameter"
    exit_code = 2


class ShapeError(LesionForgeError, ValueError):
    kind = "shape"
    exit_code = 2


class DataError(LesionForgeError, ValueError):
    kind = "data"
    exit_code = 3


class NormalizationError(DataError):
    kind = "normalization"


class DegenerateError(DataError):
    kind = "degenerate"


class FormatError(LesionForgeError, ValueError):
    """Malformed file. ``offset`` is the byte position where parsing failed."""

    kind = "format"
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(LesionForgeError, ValueError):
    kind = "config"
    exit_code = 2
