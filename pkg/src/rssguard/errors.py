"""Exception hierarchy.

Every error raised on purpose by the package derives from ``RssGuardError``
and carries a short ``category`` string that the CLI maps to an exit code.
"""


class RssGuardError(Exception):
    category = "error"


class DimensionError(RssGuardError, ValueError):
    category = "dimension"


class LabelError(RssGuardError, ValueError):
    category = "label"


class NumericError(RssGuardError, ArithmeticError):
    category = "numeric"


class ConfigError(RssGuardError, ValueError):
    category = "config"


class ProtocolError(RssGuardError, ValueError):
    category = "protocol"


class ParseError(RssGuardError, ValueError):
    category = "parse"

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(RssGuardError, ValueError):
    category = "schema"


EXIT_CODES = {
    "config": 2,
    "parse": 3,
    "schema": 3,
    "dimension": 4,
    "label": 4,
    "protocol": 4,
    "numeric": 5,
    "error": 1,
}
