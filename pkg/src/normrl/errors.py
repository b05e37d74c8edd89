"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.EXIT_CODES).
"""


class NormRLError(Exception):
    """Base class for all package errors."""


class ConfigError(NormRLError):
    """Invalid configuration, shapes, or arguments."""


class NumericError(NormRLError):
    """Non-finite values or numeric divergence."""


class ProtocolError(NormRLError):
    """API misuse, e.g. stepping a finished episode."""


class VerificationError(NormRLError):
    """A verification gate (gradient check) failed."""
