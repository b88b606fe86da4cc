"""Exception types shared across the package.

The CLI maps these onto exit statuses: data/format problems exit with 2,
model/config mismatches with 3.
"""


class NerError(Exception):
    """Base class for all package errors."""


class SchemeError(NerError, ValueError):
    """A label id or label name does not belong to the scheme in use."""


class IllegalSequenceError(NerError, ValueError):
    """A label sequence violates BIESO transition or boundary rules."""


class DataFormatError(NerError, ValueError):
    """Malformed input file; ``lineno`` is 1-based when known."""

    def __init__(self, message: str, lineno: int | None = None, path: str | None = None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if lineno is not None:
            where += f"line {lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConfigError(NerError, ValueError):
    """Model files, schemes or config values are mutually inconsistent."""
