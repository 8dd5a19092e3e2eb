"""Desk-scale elegant-execution pipeline: flow policy, calibrated critic, and
just-in-time intervention on a 2-D manipulation micro-benchmark."""

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Bad configuration, shapes, ids, or missing artifacts."""


class NumericError(ArithmeticError):
    """A NaN/Inf appeared, or training diverged."""
