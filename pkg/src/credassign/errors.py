"""Exception hierarchy shared across the package.

The CLI maps each class to its own exit code, so keep them distinct.
"""


class CredAssignError(Exception):
    exit_code = 1


class DimensionError(CredAssignError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""

    exit_code = 3


class DomainError(CredAssignError, ValueError):
    """An argument value lies outside the operation's domain."""

    exit_code = 3


class NonFiniteError(CredAssignError, FloatingPointError):
    """NaN or Inf produced where only finite values are allowed."""

    exit_code = 5


class ConfigurationError(CredAssignError, ValueError):
    exit_code = 2


class StateError(CredAssignError, RuntimeError):
    exit_code = 6


class FormatError(CredAssignError, ValueError):
    """A file on disk does not match the expected layout."""

    exit_code = 4


class EmptySubsetError(CredAssignError, ValueError):
    exit_code = 7
