"""Exception hierarchy shared across the package.

Every error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class PlugTaggerError(Exception):
    exit_code = 3


class UsageError(PlugTaggerError):
    exit_code = 1


class DataError(PlugTaggerError):
    """Malformed or missing input data."""

    exit_code = 2


class ContractError(PlugTaggerError):
    """A documented pre/postcondition was violated."""

    exit_code = 3


class ShapeError(ContractError):
    pass


class NumericError(ContractError):
    pass


class VocabError(ContractError):
    pass


class LengthError(ContractError):
    pass


class ModeError(ContractError):
    pass


class SelectionError(ContractError):
    """A label ran out of candidate words during label-word selection."""

    def __init__(self, label: str):
        super().__init__(f"label {label!r} exhausted its candidate words")
        self.label = label


# checkpoint / plugin file errors: one class per failure so callers can branch on it
class FormatError(DataError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class HashMismatchError(ContractError):
    """Plugin was trained against a different backbone."""


class UnknownTaskError(ContractError):
    pass
