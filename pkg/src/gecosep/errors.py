"""Semantic exception hierarchy shared by all modules.

Every failure mode raised by the toolkit is one of these, so callers (and
the CLI exit-code mapping) can dispatch on type instead of parsing messages.
"""


class GecosepError(Exception):
    """Base class for all toolkit errors."""


class DomainError(GecosepError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(GecosepError):
    """Vector lengths or array shapes are inconsistent."""


class FormatError(GecosepError):
    """A file or byte stream does not match the expected format."""


class DegenerateInputError(GecosepError):
    """Input is structurally valid but degenerate (zero power, constant)."""


class NumericError(GecosepError):
    """A computation produced a non-finite or impossible value."""


class OrderingError(GecosepError):
    """A pipeline stage was invoked before its prerequisite stage."""


class ConfigError(GecosepError):
    """A configuration file, section, or value failed validation."""
