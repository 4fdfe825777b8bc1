"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: contract/format violations
exit 2, transport failures exit 3.
"""


class CsvqaError(Exception):
    exit_code = 1


class ContractError(CsvqaError):
    """A caller violated a documented precondition or invariant."""

    exit_code = 2


class EmptyStoreError(ContractError):
    """An operation requires a non-empty store or index."""


class FormatError(CsvqaError):
    """A binary or text artifact does not match its declared format."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TransportError(CsvqaError):
    """A remote service could not be reached or kept failing after retries."""

    exit_code = 3


class ProtocolError(TransportError):
    """A remote service answered with a payload that violates its protocol."""


class FixtureError(CsvqaError):
    """A replay fixture is missing a requested entry."""

    exit_code = 2


class UnparsedAnswerError(CsvqaError):
    """No extraction strategy could map a raw response onto an option."""

    exit_code = 2
