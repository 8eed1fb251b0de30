"""Exception hierarchy shared by every resynckit module."""

from __future__ import annotations


class ResyncError(Exception):
    """Base class for all resynckit errors."""


# -- model -----------------------------------------------------------------


class InvalidEntry(ResyncError, ValueError):
    pass


class CapacityExceeded(ResyncError):
    pass


class MalformedHash(ResyncError, ValueError):
    pass


class InvariantViolation(ResyncError, ValueError):
    pass


class UnknownCapability(ResyncError, ValueError):
    def __init__(self, token: str):
        super().__init__(f"unknown capability token: {token!r}")
        self.token = token


class UnknownChangeToken(ResyncError, ValueError):
    def __init__(self, token: str | None, locator: str = ""):
        super().__init__(f"unknown or missing change token {token!r} at {locator or '?'}")
        self.token = token
        self.locator = locator


# -- codec -----------------------------------------------------------------


class XmlSyntax(ResyncError):
    pass


class SchemaViolation(ResyncError):
    """Strict parse rejected the input.

    ``causes`` holds every deviation found (``ParseWarning`` records), so a
    caller can see all of them rather than only the first.
    """

    def __init__(self, causes):
        self.causes = list(causes)
        detail = "; ".join(f"{c.code} at {c.locator}" for c in self.causes)
        super().__init__(f"schema violation: {detail}")

    @property
    def codes(self) -> list[str]:
        return [c.code for c in self.causes]


# -- generator -------------------------------------------------------------


class IoFailure(ResyncError, OSError):
    pass


class AlgorithmMismatch(ResyncError, ValueError):
    pass


class DuplicateCapability(ResyncError, ValueError):
    pass


class SnapshotFormatError(ResyncError, ValueError):
    pass


# -- transport -------------------------------------------------------------


class InvalidBase(ResyncError, ValueError):
    pass


class TransportError(ResyncError):
    pass


class Timeout(TransportError):
    pass


class TooManyRedirects(TransportError):
    pass


class TransportFailure(TransportError):
    pass


class DiscoveryError(ResyncError):
    pass


class NotFound(DiscoveryError):
    def __init__(self, uri: str, status: int):
        super().__init__(f"{uri} returned HTTP {status}")
        self.uri = uri
        self.status = status


class WrongCapability(DiscoveryError):
    pass


class ParseFailure(DiscoveryError):
    pass


# -- sync ------------------------------------------------------------------


class PatchFailure(ResyncError):
    pass


class StoreError(ResyncError):
    pass


class StoreLocked(StoreError):
    pass
