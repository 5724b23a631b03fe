"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class LBQError(Exception):
    exit_code = 3


class ConfigError(LBQError, ValueError):
    """Inconsistent scheme, granularity pairing, or layer metadata."""

    exit_code = 1


class DimensionError(LBQError, ValueError):
    exit_code = 2


class FormatError(LBQError, ValueError):
    """Malformed or truncated checkpoint container."""

    exit_code = 2


class RangeError(LBQError, ValueError):
    exit_code = 2


class InputError(LBQError, ValueError):
    exit_code = 2


class InvariantError(LBQError, AssertionError):
    """An internal correctness check failed (e.g. a kernel disagrees with its oracle)."""

    exit_code = 3
