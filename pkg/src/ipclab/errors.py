"""Exception types shared across the package.

The CLI maps them onto exit codes: ConfigError -> 2, NumericError -> 3,
PreconditionError -> 4.
"""


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class DomainError(ValueError):
    """A function was evaluated outside the set where it is defined."""


class PreconditionError(ValueError):
    """Inputs violate an operation's documented precondition."""


class NumericError(RuntimeError):
    """A numerical procedure failed to reach its accuracy target."""
