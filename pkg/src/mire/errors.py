"""Error hierarchy shared by all modules.

Exit codes: 2 config, 3 contract, 4 numeric (used by the CLI).
"""


class MireError(Exception):
    exit_code = 1


class ConfigError(MireError):
    """Invalid configuration value or malformed config file."""

    exit_code = 2


class ContractError(MireError):
    """A caller violated an operation's precondition."""

    exit_code = 3


class ShapeError(ContractError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(MireError):
    """An operation produced NaN/Inf or otherwise left the finite range."""

    exit_code = 4


class FormatError(MireError):
    """On-disk artifact is corrupt or has the wrong version/magic."""

    exit_code = 2
