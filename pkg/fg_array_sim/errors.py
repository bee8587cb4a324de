"""
Exception hierarchy for fg-array-sim.

Every error raised on purpose by the simulator derives from FgSimError so
callers (and the CLI) can tell domain failures from internal ones.
"""


class FgSimError(Exception):
    """Base class for all simulator errors."""


class RangeError(FgSimError, ValueError):
    """A voltage, duration, current, coordinate or amplitude is out of range."""


class UnsupportedRegimeError(FgSimError, ValueError):
    """The requested operating point is outside the modeled regime."""


class ConfigError(FgSimError):
    """Invalid experiment configuration (unknown keys, bad values, missing seed)."""


class AcceptanceError(FgSimError):
    """An experiment ran but one of its acceptance assertions failed."""
