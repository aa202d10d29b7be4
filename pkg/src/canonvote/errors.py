"""Error types shared across the package.

The CLI maps these onto exit codes: ParseError -> 2, ConfigError -> 3.
"""


class CanonvoteError(Exception):
    """Base class for errors raised by this package."""


class ParseError(CanonvoteError):
    """Malformed input data (PLY files, JSON scenes, field files, recipes)."""


class ConfigError(CanonvoteError):
    """Invalid or inconsistent configuration values."""


class PlacementError(CanonvoteError):
    """Scene synthesis could not satisfy the placement constraints."""
