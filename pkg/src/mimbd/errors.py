"""Error types shared across the lab.

The CLI maps ConfigError (and its CapabilityError subclass) to exit code 2 and
NumericsError to exit code 3; everything else is a plain failure.
"""


class MimbdError(Exception):
    """Base class for lab errors."""


class ConfigError(MimbdError):
    """Invalid or inconsistent configuration."""


class CapabilityError(ConfigError):
    """Config asks an attack to touch a supply-chain stage it cannot reach."""


class FormatError(MimbdError):
    """Malformed file or byte stream."""


class PlacementError(MimbdError):
    """Trigger placement that cannot be satisfied."""


class NumericsError(MimbdError):
    """Non-finite loss or other numerical breakdown; aborts the run."""
