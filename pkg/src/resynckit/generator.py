"""Source side: snapshot a content tree and publish capability documents."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path, PurePosixPath
from typing import Iterable, Mapping, Optional, Sequence
from urllib.parse import quote, unquote

from .errors import (
    AlgorithmMismatch,
    CapacityExceeded,
    DuplicateCapability,
    IoFailure,
    SnapshotFormatError,
)
from .fixity import DEFAULT_ALGORITHM, hash_file, hasher
from .model import (
    MAX_ENTRIES,
    Capability,
    ChangeType,
    Document,
    Entry,
    Hash,
    Ln,
    Md,
    format_datetime,
    is_absolute_uri,
    normalize_datetime,
    parse_datetime,
)

MIME_TYPES = {
    "html": "text/html",
    "json": "application/json",
    "txt": "text/plain",
    "xml": "application/xml",
}
DEFAULT_MIME_TYPE = "application/octet-stream"

SNAPSHOT_MAGIC = "resync-snapshot"
SNAPSHOT_VERSION = "1"


def mime_type_for(path: str) -> str:
    suffix = PurePosixPath(path).suffix.lower().lstrip(".")
    return MIME_TYPES.get(suffix, DEFAULT_MIME_TYPE)


def normalize_path(path: str) -> str:
    """Normalize to a relative, forward-slash path; reject escapes."""
    p = path.replace("\\", "/")
    parts = [part for part in p.split("/") if part not in ("", ".")]
    if p.startswith("/") or not parts or ".." in parts:
        raise ValueError(f"not a normalized relative path: {path!r}")
    return "/".join(parts)


@dataclass(frozen=True)
class FileRecord:
    length: int
    mtime: datetime
    hash: Hash

    def __post_init__(self):
        object.__setattr__(self, "mtime", normalize_datetime(self.mtime))


@dataclass(frozen=True)
class Snapshot:
    taken_at: datetime
    records: Mapping[str, FileRecord] = field(default_factory=dict)
    algorithm: str = DEFAULT_ALGORITHM

    def __post_init__(self):
        object.__setattr__(self, "taken_at", normalize_datetime(self.taken_at))
        records = {}
        for path in sorted(self.records):
            rec = self.records[path]
            if rec.hash.algorithm != self.algorithm:
                raise AlgorithmMismatch(
                    f"{path} hashed with {rec.hash.algorithm}, snapshot uses {self.algorithm}")
            records[normalize_path(path)] = rec
        object.__setattr__(self, "records", records)

    @property
    def paths(self) -> set[str]:
        return set(self.records)


@dataclass(frozen=True)
class ChangeRecord:
    path: str
    change: ChangeType
    after: Optional[FileRecord] = None
    # when the change was observed; deletions have no mtime of their own
    changed_at: Optional[datetime] = None

    def __post_init__(self):
        object.__setattr__(self, "change", ChangeType(self.change))
        if (self.change is ChangeType.DELETED) != (self.after is None):
            raise ValueError("a deleted record has no 'after' state, every other record does")
        if self.changed_at is not None:
            object.__setattr__(self, "changed_at", normalize_datetime(self.changed_at))


# -- scanning --------------------------------------------------------------


def _utc_mtime(st: os.stat_result) -> datetime:
    return datetime.fromtimestamp(int(st.st_mtime), tz=timezone.utc)


def scan(root_dir: str | os.PathLike, algorithm: str = DEFAULT_ALGORITHM, *,
         jobs: int = 4, taken_at: Optional[datetime] = None) -> Snapshot:
    """Hash every regular file below ``root_dir``."""
    hasher(algorithm)  # fail early on an unsupported algorithm
    root = Path(root_dir)
    if not root.is_dir():
        raise IoFailure(f"not a readable directory: {root}")
    taken_at = taken_at or datetime.now(timezone.utc)

    paths: list[tuple[str, Path]] = []

    def onerror(exc: OSError):
        raise IoFailure(f"cannot read {exc.filename}: {exc.strerror}") from exc

    for dirpath, dirnames, filenames in os.walk(root, onerror=onerror):
        dirnames.sort()
        for name in sorted(filenames):
            full = Path(dirpath) / name
            if full.is_file():
                rel = full.relative_to(root).as_posix()
                paths.append((rel, full))

    def record(item: tuple[str, Path]) -> tuple[str, FileRecord]:
        rel, full = item
        try:
            st = full.stat()
            length, digest = hash_file(full, algorithm)
        except OSError as exc:
            raise IoFailure(f"cannot read {full}: {exc.strerror}") from exc
        return rel, FileRecord(length=length, mtime=_utc_mtime(st), hash=digest)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        records = dict(pool.map(record, paths))
    return Snapshot(taken_at=taken_at, records=records, algorithm=algorithm.lower())


# -- snapshot file ---------------------------------------------------------


def dump_snapshot(snap: Snapshot) -> str:
    lines = [f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION} {snap.algorithm} {format_datetime(snap.taken_at)}"]
    for path, rec in snap.records.items():
        lines.append(f"{rec.hash.digest} {rec.length} {format_datetime(rec.mtime)} {quote(path)}")
    return "\n".join(lines) + "\n"


def load_snapshot(text: str) -> Snapshot:
    lines = text.splitlines()
    if not lines:
        raise SnapshotFormatError("empty snapshot file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != SNAPSHOT_MAGIC or header[1] != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"bad snapshot header: {lines[0]!r}")
    algorithm = header[2]
    lineno = 1
    try:
        taken_at = parse_datetime(header[3])
        records = {}
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            digest, length, mtime, path = line.split(" ")
            records[unquote(path)] = FileRecord(
                length=int(length), mtime=parse_datetime(mtime), hash=Hash(algorithm, digest))
    except ValueError as exc:
        raise SnapshotFormatError(f"line {lineno}: {exc}") from exc
    return Snapshot(taken_at=taken_at, records=records, algorithm=algorithm)


def save_snapshot(snap: Snapshot, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_snapshot(snap), encoding="utf-8")


def read_snapshot(path: str | os.PathLike) -> Snapshot:
    return load_snapshot(Path(path).read_text(encoding="utf-8"))


# -- documents -------------------------------------------------------------


def loc_for(base_url: str, path: str) -> str:
    if not is_absolute_uri(base_url):
        raise ValueError(f"base URL is not absolute: {base_url!r}")
    base = base_url if base_url.endswith("/") else base_url + "/"
    return base + quote(path)


def _root_links(capability_list_uri: Optional[str]) -> tuple[Ln, ...]:
    if capability_list_uri is None:
        return ()
    return (Ln(rel="resourcesync", href=capability_list_uri),)


def _check_capacity(n: int) -> None:
    if n > MAX_ENTRIES:
        raise CapacityExceeded(f"{n} entries exceeds limit of {MAX_ENTRIES}")


def build_resource_list(snap: Snapshot, base_url: str, modified: Optional[datetime] = None, *,
                        capability_list_uri: Optional[str] = None) -> Document:
    _check_capacity(len(snap.records))
    entries = []
    for path, rec in snap.records.items():
        md = Md(length=rec.length, type=mime_type_for(path), hash=rec.hash)
        entries.append(Entry(loc=loc_for(base_url, path), lastmod=rec.mtime, md=md))
    entries.sort(key=lambda e: e.loc)
    return Document(
        capability=Capability.RESOURCELIST,
        modified=modified if modified is not None else snap.taken_at,
        root_links=_root_links(capability_list_uri),
        entries=tuple(entries),
    )


def diff(old: Snapshot, new: Snapshot) -> list[ChangeRecord]:
    if old.algorithm != new.algorithm:
        raise AlgorithmMismatch(f"cannot diff {old.algorithm} snapshot against {new.algorithm}")
    changes = []
    for path in sorted(old.paths | new.paths):
        before = old.records.get(path)
        after = new.records.get(path)
        if before is None:
            changes.append(ChangeRecord(path, ChangeType.CREATED, after, after.mtime))
        elif after is None:
            changes.append(ChangeRecord(path, ChangeType.DELETED, None, new.taken_at))
        elif before.hash != after.hash:
            changes.append(ChangeRecord(path, ChangeType.UPDATED, after, after.mtime))
    return changes


def build_change_list(changes: Iterable[ChangeRecord], base_url: str,
                      modified: Optional[datetime] = None, *,
                      links: Optional[Mapping[str, Sequence[Ln]]] = None,
                      capability_list_uri: Optional[str] = None) -> Document:
    """One entry per change, ordered by lastmod then loc.

    ``links`` maps a relative path to extra rs:ln elements for its entry,
    e.g. a mirror (``duplicate``) or a patch document.
    """
    changes = list(changes)
    _check_capacity(len(changes))
    modified = normalize_datetime(modified) if modified else datetime.now(timezone.utc)
    links = links or {}
    entries = []
    for rec in changes:
        if rec.change is ChangeType.DELETED:
            md = Md(change=rec.change)
        else:
            md = Md(change=rec.change, length=rec.after.length, type=mime_type_for(rec.path),
                    hash=rec.after.hash)
        lastmod = rec.changed_at or (rec.after.mtime if rec.after else None) or modified
        entries.append(Entry(loc=loc_for(base_url, rec.path), lastmod=lastmod, md=md,
                             links=tuple(links.get(rec.path, ()))))
    entries.sort(key=lambda e: (e.lastmod, e.loc))
    return Document(
        capability=Capability.CHANGELIST,
        modified=modified,
        root_links=_root_links(capability_list_uri),
        entries=tuple(entries),
    )


def build_capability_list(documents: Iterable[tuple[Capability, str]],
                          describedby: Optional[str] = None,
                          modified: Optional[datetime] = None) -> Document:
    seen = set()
    entries = []
    for capability, uri in documents:
        capability = Capability(capability)
        if capability in seen:
            raise DuplicateCapability(f"capability {capability.value} listed twice")
        seen.add(capability)
        entries.append(Entry(loc=uri, md=Md(capability=capability)))
    root_links = (Ln(rel="describedby", href=describedby),) if describedby else ()
    return Document(
        capability=Capability.CAPABILITYLIST,
        modified=modified if modified is not None else datetime.now(timezone.utc),
        root_links=root_links,
        entries=tuple(entries),
    )

