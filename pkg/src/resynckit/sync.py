"""Destination side: plan and execute baseline and incremental syncs.

A ``LocalStore`` is a directory plus a manifest recording, for each
synchronized URI, where its file lives and what its fixity was. Plans are
lists of ``SyncAction``; ``execute`` carries them out, auditing every
fetched body before it is moved into place.
"""

from __future__ import annotations

import contextlib
import enum
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional
from urllib.parse import unquote, urlsplit

import jsonpatch
from jsonpointer import JsonPointerException

from .errors import (
    PatchFailure,
    ResyncError,
    StoreError,
    StoreLocked,
    UnknownChangeToken,
    WrongCapability,
)
from .fixity import DEFAULT_ALGORITHM, hash_bytes, hash_file
from .model import (
    PATCH_REL,
    Capability,
    ChangeType,
    Document,
    Entry,
    Hash,
    format_datetime,
    parse_datetime,
    parse_hash,
)
from .transport import DEFAULT_TIMEOUT, Fetcher, capability_documents, discover, fetch, fetch_document

log = logging.getLogger(__name__)

MANIFEST_NAME = ".resync-manifest"
LOCK_NAME = ".resync-lock"
TMP_DIR_NAME = ".resync-tmp"
MANIFEST_HEADER = "resync-manifest 1"
RESERVED_PREFIX = ".resync-"


class ActionKind(str, enum.Enum):
    DOWNLOAD = "download"
    PATCH = "patch"
    DELETE = "delete"
    SKIP = "skip"


class Outcome(str, enum.Enum):
    OK = "ok"
    FIXITY_MISMATCH = "fixity-mismatch"
    FETCH_FAILED = "fetch-failed"
    PATCH_FAILED = "patch-failed"


@dataclass(frozen=True)
class Expected:
    length: Optional[int] = None
    hash: Optional[Hash] = None
    type: Optional[str] = None

    @classmethod
    def of(cls, entry: Entry) -> Optional["Expected"]:
        md = entry.md
        if md is None or (md.length is None and md.hash is None and md.type is None):
            return None
        return cls(length=md.length, hash=md.hash, type=md.type)


@dataclass(frozen=True)
class SyncAction:
    kind: ActionKind
    target_uri: str
    fetch_uri: Optional[str] = None
    expected: Optional[Expected] = None
    reason: str = ""
    # tried in order when fetching from fetch_uri fails
    fallback_uris: tuple[str, ...] = ()
    lastmod: Optional[datetime] = None

    def __post_init__(self):
        kind = ActionKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ActionKind.DELETE and self.fetch_uri is not None:
            raise ValueError("a delete action fetches nothing")
        if kind in (ActionKind.DOWNLOAD, ActionKind.PATCH) and not self.fetch_uri:
            raise ValueError(f"a {kind.value} action needs a fetch URI")
        object.__setattr__(self, "fallback_uris", tuple(self.fallback_uris))


@dataclass(frozen=True)
class AuditVerdict:
    passed: bool
    problems: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class ActionResult:
    action: SyncAction
    outcome: Outcome
    fetched_uri: Optional[str] = None
    detail: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK


@dataclass
class SyncReport:
    actions_executed: list[ActionResult] = field(default_factory=list)
    audit_failures: list[str] = field(default_factory=list)
    started: Optional[datetime] = None
    finished: Optional[datetime] = None

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.actions_executed)

    def lines(self) -> list[str]:
        return [f"{'OK' if r.ok else 'FAIL'} {r.action.kind.value} {r.action.target_uri}"
                for r in self.actions_executed]


# -- fixity and patching ---------------------------------------------------


def audit_bytes(body: bytes, expected: Optional[Expected],
                content_type: Optional[str] = None) -> AuditVerdict:
    """Check a body against expected fixity.

    Absent expectations pass. A type mismatch is only a warning.
    """
    if expected is None:
        return AuditVerdict(True)
    problems = []
    warnings = []
    if expected.length is not None and len(body) != expected.length:
        problems.append(f"length {len(body)} != expected {expected.length}")
    if expected.hash is not None:
        actual = hash_bytes(body, expected.hash.algorithm)
        if actual != expected.hash:
            problems.append(f"hash {actual} != expected {expected.hash}")
    if expected.type is not None and content_type is not None and content_type != expected.type:
        warnings.append(f"type {content_type} != expected {expected.type}")
    return AuditVerdict(not problems, tuple(problems), tuple(warnings))


def canonical_json(value) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def apply_json_patch(original: bytes, patch: bytes) -> bytes:
    """Apply a JSON Patch document and return canonical JSON bytes.

    Output has sorted member names and no insignificant whitespace, so equal
    documents always hash equally.
    """
    try:
        doc = json.loads(original)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PatchFailure(f"original is not JSON: {exc}") from exc
    try:
        ops = json.loads(patch)
    except (ValueError, UnicodeDecodeError) as exc:
        raise PatchFailure(f"patch is not JSON: {exc}") from exc
    if not isinstance(ops, list) or not all(isinstance(op, dict) for op in ops):
        raise PatchFailure("a JSON patch must be an array of operation objects")
    try:
        result = jsonpatch.JsonPatch(ops).apply(doc)
    except (jsonpatch.JsonPatchException, JsonPointerException,
            KeyError, IndexError, TypeError) as exc:
        raise PatchFailure(f"patch does not apply: {exc}") from exc
    return canonical_json(result)


# -- local store -----------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    length: int
    hash: Hash
    lastmod: Optional[datetime]
    synced_at: datetime


def _enc(value: str) -> str:
    return "".join(f"%{ord(c):02X}" if c in "% \t\r\n" else c for c in value)


def uri_to_path(uri: str) -> str:
    """Map a URI to a store-relative path: the decoded URI path."""
    parts = unquote(urlsplit(uri).path).split("/")
    segments = [s for s in parts if s not in ("", ".")]
    if not segments:
        raise StoreError(f"{uri} has no path to store it under")
    if ".." in segments or any("\x00" in s or "\\" in s for s in segments):
        raise StoreError(f"{uri} maps outside the store")
    if segments[0].startswith(RESERVED_PREFIX):
        raise StoreError(f"{uri} maps onto a reserved store name")
    return "/".join(segments)


class LocalStore:
    def __init__(self, root_dir: str | os.PathLike):
        self.root = Path(root_dir)
        self.manifest: dict[str, ManifestRecord] = {}
        if self.manifest_path.exists():
            self.manifest = self._load()

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def lock_path(self) -> Path:
        return self.root / LOCK_NAME

    def file_for(self, path: str) -> Path:
        return self.root / path

    def path_for(self, uri: str) -> str:
        """Store path for ``uri``; an error if another URI already owns it."""
        record = self.manifest.get(uri)
        if record is not None:
            return record.path
        path = uri_to_path(uri)
        for other, rec in self.manifest.items():
            if rec.path == path and other != uri:
                raise StoreError(f"{uri} and {other} both map to {path}")
        return path

    def _load(self) -> dict[str, ManifestRecord]:
        lines = self.manifest_path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise StoreError(f"{self.manifest_path} is not a resync manifest")
        manifest = {}
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            try:
                uri, path, length, digest, lastmod, synced_at = line.split(" ")
                manifest[unquote(uri)] = ManifestRecord(
                    path=unquote(path),
                    length=int(length),
                    hash=parse_hash(unquote(digest)),
                    lastmod=None if lastmod == "-" else parse_datetime(lastmod),
                    synced_at=parse_datetime(synced_at),
                )
            except ValueError as exc:
                raise StoreError(f"{self.manifest_path}:{lineno}: {exc}") from exc
        return manifest

    def save(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        lines = [MANIFEST_HEADER]
        for uri in sorted(self.manifest):
            rec = self.manifest[uri]
            lastmod = format_datetime(rec.lastmod) if rec.lastmod else "-"
            lines.append(" ".join([_enc(uri), _enc(rec.path), str(rec.length), _enc(str(rec.hash)),
                                   lastmod, format_datetime(rec.synced_at)]))
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".resync-manifest.")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, self.manifest_path)

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreLocked(f"{self.root} is in use by another sync ({self.lock_path})") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            with contextlib.suppress(FileNotFoundError):
                os.unlink(self.lock_path)

    def local_hash(self, uri: str, algorithm: str) -> Optional[Hash]:
        """Hash of the stored copy of ``uri`` in ``algorithm``, or None."""
        rec = self.manifest.get(uri)
        if rec is None:
            return None
        if rec.hash.algorithm == algorithm:
            return rec.hash
        try:
            return hash_file(self.file_for(rec.path), algorithm)[1]
        except OSError:
            return None

    def matches(self, uri: str, entry: Entry) -> bool:
        """Whether the stored copy of ``uri`` is already what ``entry`` describes."""
        rec = self.manifest.get(uri)
        if rec is None:
            return False
        md = entry.md
        if md is not None and md.hash is not None:
            return self.local_hash(uri, md.hash.algorithm) == md.hash
        if md is not None and md.length is not None and md.length != rec.length:
            return False
        return entry.lastmod is not None and entry.lastmod == rec.lastmod

    def audit(self) -> list[str]:
        """URIs whose stored file is missing or no longer matches the manifest."""
        failures = []
        for uri, rec in sorted(self.manifest.items()):
            try:
                length, digest = hash_file(self.file_for(rec.path), rec.hash.algorithm)
            except OSError:
                failures.append(uri)
                continue
            if length != rec.length or digest != rec.hash:
                failures.append(uri)
        return failures


# -- planning --------------------------------------------------------------


def fetch_chain(entry: Entry) -> list[str]:
    """Download sources in preference order: mirrors first, then loc."""
    chain = []
    for ln in entry.links_with_rel("duplicate"):
        if ln.href not in chain:
            chain.append(ln.href)
    if entry.loc not in chain:
        chain.append(entry.loc)
    return chain


def select_fetch_uri(entry: Entry, local_present: bool) -> tuple[ActionKind, str]:
    if local_present and entry.change is ChangeType.UPDATED:
        patches = entry.links_with_rel(PATCH_REL)
        if patches:
            return ActionKind.PATCH, patches[0].href
    return ActionKind.DOWNLOAD, fetch_chain(entry)[0]


def _fetch_action(entry: Entry, store: LocalStore, reason: str) -> SyncAction:
    local = entry.loc in store.manifest
    kind, uri = select_fetch_uri(entry, local)
    chain = fetch_chain(entry)
    fallbacks = chain if kind is ActionKind.PATCH else [u for u in chain if u != uri]
    return SyncAction(kind, entry.loc, uri, Expected.of(entry), reason, tuple(fallbacks),
                      entry.lastmod)


def _last_occurrences(doc: Document) -> list[tuple[int, Entry]]:
    last: dict[str, tuple[int, Entry]] = {}
    for i, entry in enumerate(doc.entries):
        last[entry.loc] = (i, entry)
    return sorted(last.values(), key=lambda pair: pair[0])


def plan_baseline(resource_list: Document, store: LocalStore) -> list[SyncAction]:
    if resource_list.capability is not Capability.RESOURCELIST:
        raise WrongCapability(f"baseline sync needs a resourcelist, got "
                              f"{resource_list.capability.value}")
    plan = []
    listed = set()
    for _, entry in _last_occurrences(resource_list):
        listed.add(entry.loc)
        if entry.loc not in store.manifest:
            plan.append(_fetch_action(entry, store, "absent"))
        elif store.matches(entry.loc, entry):
            plan.append(SyncAction(ActionKind.SKIP, entry.loc, reason="up-to-date",
                                   expected=Expected.of(entry), lastmod=entry.lastmod))
        else:
            plan.append(_fetch_action(entry, store, "changed"))
    for uri in sorted(set(store.manifest) - listed):
        plan.append(SyncAction(ActionKind.DELETE, uri, reason="not-in-list"))
    return plan


def _change_token(doc: Document, index: int) -> Optional[str]:
    for node in doc.extensions:
        if node.entry_index == index and node.code == "unknown-change-token":
            return node.value
    return None


def plan_incremental(change_list: Document, store: LocalStore, *,
                     strict: bool = True) -> list[SyncAction]:
    """Plan from a change list; for repeated URIs the last entry wins."""
    if change_list.capability is not Capability.CHANGELIST:
        raise WrongCapability(f"incremental sync needs a changelist, got "
                              f"{change_list.capability.value}")
    plan = []
    for index, entry in _last_occurrences(change_list):
        change = entry.change
        if change is None:
            if strict:
                raise UnknownChangeToken(_change_token(change_list, index),
                                         f"/urlset/url[{index + 1}]")
            plan.append(SyncAction(ActionKind.SKIP, entry.loc, reason="unknown-change"))
        elif change is ChangeType.DELETED:
            plan.append(SyncAction(ActionKind.DELETE, entry.loc, reason="deleted"))
        elif entry.loc in store.manifest and store.matches(entry.loc, entry):
            plan.append(SyncAction(ActionKind.SKIP, entry.loc, reason="up-to-date",
                                   expected=Expected.of(entry), lastmod=entry.lastmod))
        else:
            plan.append(_fetch_action(entry, store, change.value))
    return plan


# -- execution -------------------------------------------------------------


@dataclass
class _Staged:
    result: ActionResult
    tmp_path: Optional[str] = None
    length: int = 0
    hash: Optional[Hash] = None


class _Runner:
    def __init__(self, store: LocalStore, fetcher: Fetcher, timeout: float):
        self.store = store
        self.fetcher = fetcher
        self.timeout = timeout
        self.tmp_dir = store.root / TMP_DIR_NAME

    def stage(self, body: bytes, action: SyncAction, fetched: str, warnings) -> _Staged:
        algorithm = action.expected.hash.algorithm if action.expected and action.expected.hash \
            else DEFAULT_ALGORITHM
        fd, tmp = tempfile.mkstemp(dir=self.tmp_dir)
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        return _Staged(ActionResult(action, Outcome.OK, fetched, warnings=tuple(warnings)),
                       tmp, len(body), hash_bytes(body, algorithm))

    def download(self, action: SyncAction, uris: list[str],
                 first_failure: Optional[tuple[Outcome, str]] = None) -> _Staged:
        failure = first_failure
        for uri in uris:
            try:
                res = fetch(uri, self.fetcher, timeout=self.timeout)
            except ResyncError as exc:
                failure = failure or (Outcome.FETCH_FAILED, f"{uri}: {exc}")
                continue
            if not res.ok:
                failure = failure or (Outcome.FETCH_FAILED, f"{uri}: HTTP {res.status}")
                continue
            verdict = audit_bytes(res.body, action.expected, res.content_type)
            if not verdict:
                failure = failure or (Outcome.FIXITY_MISMATCH,
                                      f"{uri}: " + "; ".join(verdict.problems))
                continue
            return self.stage(res.body, action, uri, verdict.warnings)
        outcome, detail = failure or (Outcome.FETCH_FAILED, "no URI to fetch")
        return _Staged(ActionResult(action, outcome, detail=detail))

    def patch(self, action: SyncAction, path: str) -> _Staged:
        try:
            original = self.store.file_for(path).read_bytes()
            res = fetch(action.fetch_uri, self.fetcher, timeout=self.timeout)
            if not res.ok:
                raise PatchFailure(f"HTTP {res.status} for patch {action.fetch_uri}")
            body = apply_json_patch(original, res.body)
        except (OSError, ResyncError) as exc:
            log.info("patch of %s failed, falling back to download: %s", action.target_uri, exc)
            return self.download(action, list(action.fallback_uris),
                                 (Outcome.PATCH_FAILED, str(exc)))
        verdict = audit_bytes(body, action.expected)
        if not verdict:
            log.info("patched %s fails audit, falling back to download", action.target_uri)
            return self.download(action, list(action.fallback_uris),
                                 (Outcome.FIXITY_MISMATCH, "; ".join(verdict.problems)))
        return self.stage(body, action, action.fetch_uri, verdict.warnings)

    def run(self, action: SyncAction, path: str) -> _Staged:
        if action.kind is ActionKind.PATCH:
            return self.patch(action, path)
        return self.download(action, [action.fetch_uri, *action.fallback_uris])


def _prune_empty_dirs(root: Path, start: Path) -> None:
    d = start
    while d != root and root in d.parents:
        try:
            d.rmdir()
        except OSError:
            return
        d = d.parent


def execute(plan: list[SyncAction], store: LocalStore, fetcher: Fetcher, *,
            jobs: int = 4, timeout: float = DEFAULT_TIMEOUT) -> SyncReport:
    """Carry out ``plan`` against ``store``.

    Fetches run on up to ``jobs`` threads; installing files and updating the
    manifest happen on the calling thread only. A body that fails its audit
    is never moved into place.
    """
    report = SyncReport(started=datetime.now(timezone.utc))
    runner = _Runner(store, fetcher, timeout)
    with store.lock():
        runner.tmp_dir.mkdir(parents=True, exist_ok=True)
        try:
            with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
                pending = []
                claimed: dict[str, str] = {}
                for action in plan:
                    if action.kind in (ActionKind.DOWNLOAD, ActionKind.PATCH):
                        try:
                            path = store.path_for(action.target_uri)
                            owner = claimed.setdefault(path, action.target_uri)
                            if owner != action.target_uri:
                                raise StoreError(f"{action.target_uri} and {owner} both map to {path}")
                        except StoreError as exc:
                            pending.append((action, None, ActionResult(
                                action, Outcome.FETCH_FAILED, detail=str(exc))))
                            continue
                        pending.append((action, path, pool.submit(runner.run, action, path)))
                    else:
                        pending.append((action, None, None))

                for action, path, work in pending:
                    if isinstance(work, ActionResult):
                        report.actions_executed.append(work)
                    elif action.kind is ActionKind.SKIP:
                        report.actions_executed.append(ActionResult(action, Outcome.OK))
                    elif action.kind is ActionKind.DELETE:
                        report.actions_executed.append(_delete(store, action))
                    else:
                        staged = work.result()
                        if staged.tmp_path is not None:
                            _install(store, action, path, staged)
                        if staged.result.outcome is Outcome.FIXITY_MISMATCH:
                            report.audit_failures.append(action.target_uri)
                        report.actions_executed.append(staged.result)
        finally:
            try:
                store.save()
            finally:
                for leftover in runner.tmp_dir.glob("*"):
                    leftover.unlink()
                with contextlib.suppress(OSError):
                    runner.tmp_dir.rmdir()
    report.finished = datetime.now(timezone.utc)
    return report


def _install(store: LocalStore, action: SyncAction, path: str, staged: _Staged) -> None:
    final = store.file_for(path)
    final.parent.mkdir(parents=True, exist_ok=True)
    os.replace(staged.tmp_path, final)
    store.manifest[action.target_uri] = ManifestRecord(
        path=path,
        length=staged.length,
        hash=staged.hash,
        lastmod=action.lastmod,
        synced_at=datetime.now(timezone.utc).replace(microsecond=0),
    )


def _delete(store: LocalStore, action: SyncAction) -> ActionResult:
    rec = store.manifest.pop(action.target_uri, None)
    if rec is not None:
        target = store.file_for(rec.path)
        with contextlib.suppress(FileNotFoundError):
            target.unlink()
        _prune_empty_dirs(store.root, target.parent)
    return ActionResult(action, Outcome.OK)


def sync_source(mode: str, source: str, store: LocalStore, fetcher: Fetcher, *,
                jobs: int = 4, timeout: float = DEFAULT_TIMEOUT) -> SyncReport:
    """Discover ``source``, fetch the document ``mode`` needs, plan and execute.

    ``mode`` is ``"baseline"`` (Resource List) or ``"incremental"`` (Change
    List). Discovery and transport errors propagate.
    """
    wanted = {"baseline": Capability.RESOURCELIST, "incremental": Capability.CHANGELIST}[mode]
    caplist, _ = discover(source, fetcher, timeout=timeout)
    uri = capability_documents(caplist).get(wanted)
    if uri is None:
        raise WrongCapability(f"{source} does not offer a {wanted.value}")
    doc = fetch_document(uri, fetcher, timeout=timeout)
    if mode == "baseline":
        plan = plan_baseline(doc, store)
    else:
        plan = plan_incremental(doc, store, strict=False)
    return execute(plan, store, fetcher, jobs=jobs, timeout=timeout)
