"""Shared exception types mapped to CLI exit codes."""


class ValidationError(ValueError):
    """Bad arguments, malformed configs, contract violations. Exit code 1."""


class NumericError(RuntimeError):
    """Non-finite values or numerical failures during training/eval. Exit code 2."""
