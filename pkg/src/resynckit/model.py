"""In-memory representation of ResourceSync capability documents.

All types are frozen dataclasses. Operations that "modify" a document
return a new one.
"""

from __future__ import annotations

import dataclasses
import enum
import re
import string
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Optional
from urllib.parse import urlsplit

from .errors import CapacityExceeded, InvalidEntry, InvariantViolation, MalformedHash

MAX_ENTRIES = 50_000
MAX_SERIALIZED_BYTES = 10 * 1024 * 1024

PATCH_REL = "http://www.openarchives.org/rs/terms/patch"


class Capability(str, enum.Enum):
    RESOURCELIST = "resourcelist"
    CHANGELIST = "changelist"
    CAPABILITYLIST = "capabilitylist"

    def __str__(self) -> str:
        return self.value


class ChangeType(str, enum.Enum):
    CREATED = "created"
    UPDATED = "updated"
    DELETED = "deleted"

    def __str__(self) -> str:
        return self.value


# -- timestamps ------------------------------------------------------------

_W3C_RE = re.compile(
    r"""^(?P<year>\d{4})
        (?:-(?P<month>\d{2})
          (?:-(?P<day>\d{2})
            (?:T(?P<hour>\d{2}):(?P<minute>\d{2})
              (?::(?P<second>\d{2})(?:\.(?P<frac>\d+))?)?
              (?P<tz>Z|[+-]\d{2}:\d{2})
            )?
          )?
        )?$""",
    re.VERBOSE,
)


def parse_datetime(text: str) -> datetime:
    """Parse any W3C datetime profile form into an aware UTC datetime.

    Sub-second precision is dropped; serialization only carries seconds.
    """
    m = _W3C_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a W3C datetime: {text!r}")
    g = m.groupdict()
    tz = timezone.utc
    if g["tz"] and g["tz"] != "Z":
        sign = 1 if g["tz"][0] == "+" else -1
        hh, mm = g["tz"][1:].split(":")
        tz = timezone(sign * timedelta(hours=int(hh), minutes=int(mm)))
    dt = datetime(
        int(g["year"]),
        int(g["month"] or 1),
        int(g["day"] or 1),
        int(g["hour"] or 0),
        int(g["minute"] or 0),
        int(g["second"] or 0),
        tzinfo=tz,
    )
    return dt.astimezone(timezone.utc)


def normalize_datetime(dt: datetime) -> datetime:
    # naive datetimes are taken to be UTC
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


def format_datetime(dt: datetime) -> str:
    return normalize_datetime(dt).strftime("%Y-%m-%dT%H:%M:%SZ")


def is_absolute_uri(value: str) -> bool:
    if not value or any(c.isspace() for c in value):
        return False
    try:
        parts = urlsplit(value)
    except ValueError:
        return False
    if not parts.scheme or not parts.scheme[0].isalpha():
        return False
    if parts.scheme in ("http", "https", "ftp"):
        return bool(parts.netloc)
    return bool(parts.netloc or parts.path)


# -- hashes ----------------------------------------------------------------

# digest length in hex characters for the algorithms we know about
HASH_HEX_LENGTHS = {
    "md5": 32,
    "sha-1": 40,
    "sha-256": 64,
    "sha-512": 128,
}

# ResourceSync token -> hashlib name
HASHLIB_NAMES = {
    "md5": "md5",
    "sha-1": "sha1",
    "sha-256": "sha256",
    "sha-512": "sha512",
}

_HEX = set(string.hexdigits)


@dataclass(frozen=True)
class Hash:
    algorithm: str
    digest: str

    def __post_init__(self):
        algorithm = self.algorithm.strip().lower()
        digest = self.digest.strip().lower()
        if not algorithm or not digest:
            raise MalformedHash(f"empty hash part in {self.algorithm!r}:{self.digest!r}")
        if ":" in algorithm or any(c.isspace() for c in algorithm):
            raise MalformedHash(f"bad hash algorithm token {self.algorithm!r}")
        if not set(digest) <= _HEX:
            raise MalformedHash(f"digest is not hex: {self.digest!r}")
        expected = HASH_HEX_LENGTHS.get(algorithm)
        if expected is not None and len(digest) != expected:
            raise MalformedHash(
                f"{algorithm} digest must be {expected} hex chars, got {len(digest)}"
            )
        object.__setattr__(self, "algorithm", algorithm)
        object.__setattr__(self, "digest", digest)

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.digest}"


def parse_hash(token: str) -> Hash:
    """Parse ``"algorithm:digest"``, splitting on the first colon."""
    algorithm, sep, digest = token.strip().partition(":")
    if not sep:
        raise MalformedHash(f"hash token has no ':' separator: {token!r}")
    return Hash(algorithm, digest)


# -- elements --------------------------------------------------------------


@dataclass(frozen=True)
class Md:
    capability: Optional[Capability] = None
    modified: Optional[datetime] = None
    change: Optional[ChangeType] = None
    length: Optional[int] = None
    type: Optional[str] = None
    hash: Optional[Hash] = None

    def __post_init__(self):
        if self.capability is not None:
            object.__setattr__(self, "capability", Capability(self.capability))
        if self.change is not None:
            object.__setattr__(self, "change", ChangeType(self.change))
        if self.modified is not None:
            object.__setattr__(self, "modified", normalize_datetime(self.modified))
        if self.length is not None:
            if isinstance(self.length, bool) or not isinstance(self.length, int) or self.length < 0:
                raise InvariantViolation(f"length must be a non-negative integer: {self.length!r}")
        if self.type is not None and (not self.type or any(c.isspace() for c in self.type)):
            raise InvariantViolation(f"bad MIME type token: {self.type!r}")
        if isinstance(self.hash, str):
            object.__setattr__(self, "hash", parse_hash(self.hash))

    @property
    def is_empty(self) -> bool:
        return all(getattr(self, f.name) is None for f in dataclasses.fields(self))

    def check_root_scope(self) -> None:
        if self.capability is None:
            raise InvariantViolation("root rs:md requires a capability")
        for name in ("change", "length", "type", "hash"):
            if getattr(self, name) is not None:
                raise InvariantViolation(f"root rs:md must not carry {name!r}")

    def check_entry_scope(self, allow_capability: bool = False) -> None:
        if self.modified is not None:
            raise InvariantViolation("entry rs:md must not carry 'modified'")
        if self.capability is not None and not allow_capability:
            raise InvariantViolation("entry rs:md carries 'capability' outside a capability list")


@dataclass(frozen=True)
class Ln:
    rel: str
    href: str
    type: Optional[str] = None

    def __post_init__(self):
        if not self.rel or not self.rel.strip():
            raise InvariantViolation("rs:ln rel must be non-empty")
        if not is_absolute_uri(self.href):
            raise InvariantViolation(f"rs:ln href is not an absolute URI: {self.href!r}")
        if self.type is not None and (not self.type or any(c.isspace() for c in self.type)):
            raise InvariantViolation(f"bad MIME type token: {self.type!r}")


@dataclass(frozen=True)
class Entry:
    loc: str
    lastmod: Optional[datetime] = None
    md: Optional[Md] = None
    links: tuple[Ln, ...] = ()

    def __post_init__(self):
        if not isinstance(self.loc, str) or not is_absolute_uri(self.loc):
            raise InvalidEntry(f"loc must be an absolute URI: {self.loc!r}")
        if self.lastmod is not None:
            object.__setattr__(self, "lastmod", normalize_datetime(self.lastmod))
        if self.md is not None:
            self.md.check_entry_scope(allow_capability=True)
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def change(self) -> Optional[ChangeType]:
        return self.md.change if self.md else None

    def links_with_rel(self, rel: str) -> list[Ln]:
        return [ln for ln in self.links if ln.rel == rel]


@dataclass(frozen=True)
class ForeignNode:
    """A construct outside the adopted format, kept by tolerant parsing.

    ``kind`` is ``"element"`` or ``"attribute"``; ``parent`` names the
    element it was found on (``urlset``, ``url``, ``loc``, ``lastmod``,
    ``rs:md``, ``rs:ln``). ``entry_index`` is the 0-based url position, or
    None at root scope.
    """

    kind: str
    name: str
    namespace: Optional[str]
    parent: str
    locator: str
    entry_index: Optional[int] = None
    value: str = ""
    attributes: tuple[tuple[str, str], ...] = ()
    code: str = ""


@dataclass(frozen=True)
class Document:
    capability: Capability
    modified: Optional[datetime] = None
    root_links: tuple[Ln, ...] = ()
    entries: tuple[Entry, ...] = ()
    extensions: tuple[ForeignNode, ...] = field(default=(), compare=True)
    capability_inferred: bool = False

    def __post_init__(self):
        object.__setattr__(self, "capability", Capability(self.capability))
        if self.modified is not None:
            object.__setattr__(self, "modified", normalize_datetime(self.modified))
        object.__setattr__(self, "root_links", tuple(self.root_links))
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "extensions", tuple(self.extensions))
        if len(self.entries) > MAX_ENTRIES:
            raise CapacityExceeded(f"{len(self.entries)} entries exceeds limit of {MAX_ENTRIES}")
        is_caplist = self.capability is Capability.CAPABILITYLIST
        for i, entry in enumerate(self.entries):
            _check_entry_for(entry, is_caplist, i)

    @classmethod
    def from_root_md(cls, md: Md, root_links=(), entries=(), extensions=()) -> "Document":
        md.check_root_scope()
        return cls(capability=md.capability, modified=md.modified, root_links=root_links,
                   entries=entries, extensions=extensions)

    @property
    def md(self) -> Md:
        """The root-scope rs:md."""
        return Md(capability=self.capability, modified=self.modified)

    def links_with_rel(self, rel: str) -> list[Ln]:
        return [ln for ln in self.root_links if ln.rel == rel]


def _check_entry_for(entry: Entry, is_caplist: bool, index: int) -> None:
    has_cap = entry.md is not None and entry.md.capability is not None
    if is_caplist and not has_cap:
        raise InvariantViolation(
            f"capability list entry {index} ({entry.loc}) must name its target capability"
        )
    if not is_caplist and has_cap:
        raise InvariantViolation(
            f"entry {index} ({entry.loc}) carries a capability outside a capability list"
        )


def new_document(capability: Capability, modified: Optional[datetime] = None) -> Document:
    return Document(capability=Capability(capability), modified=modified)


def add_entry(doc: Document, entry: Entry) -> Document:
    """Return a copy of ``doc`` with ``entry`` appended."""
    if not isinstance(entry, Entry):
        raise InvalidEntry(f"not an Entry: {entry!r}")
    if len(doc.entries) >= MAX_ENTRIES:
        raise CapacityExceeded(f"document already holds {MAX_ENTRIES} entries")
    _check_entry_for(entry, doc.capability is Capability.CAPABILITYLIST, len(doc.entries))
    return dataclasses.replace(doc, entries=doc.entries + (entry,))

