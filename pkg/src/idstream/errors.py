"""Exception taxonomy shared across the package.

Validation-type errors derive from ValueError, runtime/state errors from
RuntimeError, so the CLI can map them to exit codes 1 and 2 respectively.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the operation."""


class UndefinedSoftmaxError(ValueError):
    """Attention was asked to normalize over an empty key set."""


class DegenerateStatisticsError(ValueError):
    """Per-channel statistics are too degenerate for the operation (e.g. sigma ~ 0)."""


class InputError(ValueError):
    """An argument is outside its documented domain."""


class ConfigError(ValueError):
    """Configuration file or flag violates the schema."""


class StateError(RuntimeError):
    """Required prior state (forward cache, captures, ...) is missing."""


class GenerationError(RuntimeError):
    """Procedural data generation could not satisfy its post-conditions."""
