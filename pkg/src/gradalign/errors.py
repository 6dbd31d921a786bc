"""Exception hierarchy shared by the library and the CLI.

Exit codes: 1 input error, 2 configuration error, 3 numerical error.
"""


class GradAlignError(Exception):
    """Base class for all errors raised by gradalign."""

    exit_code = 1


class InputError(GradAlignError):
    """Bad runtime input: malformed dataset line, wrong image shape, etc."""

    exit_code = 1


class ConfigError(GradAlignError):
    """Bad configuration: invalid model config, epsilon >= 0, missing vocab."""

    exit_code = 2


class LoadError(ConfigError):
    """Weight container problems: missing tensor, shape mismatch."""


class NumericalError(GradAlignError):
    """Non-finite values or degenerate numerics (zero-norm embedding)."""

    exit_code = 3


class ConsistencyError(GradAlignError):
    """Internal cross-check failed, e.g. token/span character mismatch."""
