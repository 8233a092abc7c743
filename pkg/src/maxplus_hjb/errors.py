"""Exception hierarchy shared across the package.

CLI exit codes: ConfigurationError and UsageError map to 2,
NumericalError to 3.
"""


class ConfigurationError(Exception):
    """A problem, generator, or run configuration is invalid."""


class UsageError(Exception):
    """An operation was called with arguments it cannot accept."""


class NumericalError(Exception):
    """A numerical procedure failed (indefinite matrix, non-convergence, ...)."""
