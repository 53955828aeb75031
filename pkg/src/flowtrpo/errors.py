"""Error surfaces shared across the package.

Every failure mode is a named exception so callers can tell configuration
mistakes apart from numerical blow-ups (the latter abort an iteration, never
a run).
"""


class FlowTrpoError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowTrpoError):
    """Operands do not conform (a configuration error, not a numeric one)."""


class DomainError(FlowTrpoError):
    """An input lies outside an operation's mathematical domain (e.g. log of
    a non-positive value)."""


class NumericError(FlowTrpoError):
    """A computation produced non-finite values or otherwise collapsed."""


class ContractError(FlowTrpoError):
    """An API was called in a way its contract forbids (e.g. grad of a
    non-scalar output)."""


class ConfigError(FlowTrpoError):
    """A run configuration is invalid; the message names the offending key
    or line."""
