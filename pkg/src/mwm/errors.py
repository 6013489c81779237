"""Shared exception types, mapped to CLI exit codes by mwm.cli."""


class ContractError(ValueError):
    """A caller violated an interface precondition (exit code 1)."""


class VerificationError(RuntimeError):
    """A metric or artifact failed a bundled verification check (exit code 3)."""
