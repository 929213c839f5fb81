"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, OSError -> 4.
"""


class ToolwearError(Exception):
    pass


class ConfigError(ToolwearError, ValueError):
    pass


class DataError(ToolwearError, ValueError):
    pass


class FormatError(DataError):
    """File content does not follow the expected binary layout."""


class TruncatedError(FormatError):
    pass


class UnsupportedMaxvalError(FormatError):
    pass


class ShapeMismatchError(DataError):
    pass
