"""Exception taxonomy shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 1,
DataError -> 2, ProtocolError (and anything raised mid-training) -> 3.
"""


class TabVFLError(Exception):
    """Base class for all package errors."""


class ConfigError(TabVFLError):
    """Invalid or inconsistent configuration."""


class DataError(TabVFLError):
    """Dataset loading, parsing, or preprocessing failure."""


class ProtocolError(TabVFLError):
    """Violation of the host/guest message protocol."""


class WireFormatError(ProtocolError):
    """Malformed bytes on the wire (bad magic, unknown tag, truncation)."""


class TransportTimeout(ProtocolError):
    """A guest failed to answer within the receive timeout."""

    def __init__(self, guest_id: int, message: str = ""):
        self.guest_id = guest_id
        super().__init__(message or f"guest {guest_id} timed out")


class CheckpointFormatError(DataError):
    """Corrupted or truncated checkpoint file."""
