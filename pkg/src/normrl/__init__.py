"""Normalization-for-generalization testbed: CrossNorm/SelfNorm encoder
blocks, a from-scratch numeric core, a shifted-rendering gridworld, a
value-based pixel agent, and the experiment harness around them."""

__version__ = "0.1.0"

from .errors import ConfigError, NormRLError, NumericError, ProtocolError, VerificationError

__all__ = [
    "ConfigError",
    "NormRLError",
    "NumericError",
    "ProtocolError",
    "VerificationError",
    "__version__",
]
