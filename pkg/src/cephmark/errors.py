"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: config/contract problems exit 1,
file problems exit 2, numerical failures exit 3.
"""


class CephmarkError(Exception):
    """Base class for all toolkit errors."""


class ContractError(CephmarkError):
    """A precondition or invariant was violated by the caller."""


class ConfigError(CephmarkError):
    """Invalid training or CLI configuration."""


class FormatError(CephmarkError):
    """A file exists but its contents are malformed (annotations, weights, checkpoints)."""


class NumericalError(CephmarkError):
    """Training produced a non-finite value."""


class EmptyActivationError(CephmarkError):
    """Every vote for a landmark landed out of bounds; caller should fall back to the heat-map argmax."""
