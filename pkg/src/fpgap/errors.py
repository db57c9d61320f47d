"""Exception types shared across the package.

The CLI maps these onto process exit codes (config -> 1, numeric -> 2).
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class NumericError(ArithmeticError):
    """Non-finite values or divergence during a computation."""
