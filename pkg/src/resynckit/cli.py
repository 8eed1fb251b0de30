"""``resync`` command line entry point."""

from __future__ import annotations

import enum
import sys
from pathlib import Path

import click

from . import codec, generator, sync, transport, validator
from .errors import (
    IoFailure,
    ResyncError,
    SchemaViolation,
    StoreError,
    UnknownCapability,
    XmlSyntax,
)
from .fixity import hash_file
from .model import Capability, parse_datetime


class ExitCode(enum.IntEnum):
    OK = 0
    VALIDATION_ERRORS = 1
    USAGE = 2
    TRANSPORT = 3
    SYNC_FAILURES = 4


NETWORK_OPTIONS = [
    click.option("--timeout", type=float, default=transport.DEFAULT_TIMEOUT, show_default=True,
                 help="Per-request timeout in seconds."),
    click.option("--jobs", type=click.IntRange(min=1), default=4, show_default=True,
                 help="Concurrent fetches."),
]


def network_options(fn):
    for option in reversed(NETWORK_OPTIONS):
        fn = option(fn)
    return fn


def _datetime(ctx, param, value):
    if value is None:
        return None
    try:
        return parse_datetime(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


def _emit(data: bytes, out: str | None) -> None:
    if out:
        Path(out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()


def _fail(message: str, code: ExitCode) -> None:
    click.echo(message, err=True)
    sys.exit(code)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """ResourceSync documents: parse, validate, generate, discover, sync, audit."""


@main.command("parse")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["strict", "tolerant"]), default="tolerant",
              show_default=True)
def cmd_parse(file, mode):
    """Parse FILE and print its canonical serialization; warnings go to stderr."""
    try:
        doc, warnings = codec.parse(Path(file).read_bytes(), mode)
    except SchemaViolation as exc:
        for cause in exc.causes:
            click.echo(f"ERROR {cause}", err=True)
        sys.exit(ExitCode.VALIDATION_ERRORS)
    except (XmlSyntax, UnknownCapability) as exc:
        _fail(f"ERROR {exc}", ExitCode.VALIDATION_ERRORS)
    for w in warnings:
        click.echo(f"WARNING {w}", err=True)
    _emit(codec.serialize(doc), None)


@main.command("validate")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--regime", type=click.Choice(["original", "updated", "tolerant"]),
              default="updated", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text",
              show_default=True)
def cmd_validate(file, regime, fmt):
    """Report findings for FILE under a schema regime; exit 1 on errors."""
    try:
        doc, _ = codec.parse(Path(file).read_bytes(), codec.ParseMode.TOLERANT)
    except (XmlSyntax, SchemaViolation) as exc:
        _fail(f"ERROR {exc}", ExitCode.VALIDATION_ERRORS)
    findings = validator.validate(doc, regime)
    if fmt == "json":
        click.echo(validator.render_json(findings))
    else:
        click.echo(validator.render_text(findings), nl=False)
    sys.exit(ExitCode.VALIDATION_ERRORS if validator.has_errors(findings) else ExitCode.OK)


def _default_snapshot_path(snapshot, out):
    if snapshot:
        return snapshot
    return f"{out}.snapshot" if out else None


@main.command("generate")
@click.argument("kind", type=click.Choice([c.value for c in Capability]))
@click.option("--dir", "dir_", type=click.Path(file_okay=False), help="Content tree to scan.")
@click.option("--base-url", help="URI prefix for entry locs.")
@click.option("--old-snapshot", "--old", "old", type=click.Path(dir_okay=False),
              help="Earlier snapshot (changelist).")
@click.option("--new-snapshot", "--new", "new", type=click.Path(dir_okay=False),
              help="Later snapshot (changelist); defaults to scanning --dir.")
@click.option("--out", type=click.Path(dir_okay=False), help="Output file; default stdout.")
@click.option("--hash", "algorithm", type=click.Choice(["md5", "sha-256"]), default="md5",
              show_default=True)
@click.option("--snapshot", type=click.Path(dir_okay=False),
              help="Where to write the scan snapshot; default <out>.snapshot.")
@click.option("--modified", callback=_datetime, help="Root modified time (W3C datetime).")
@click.option("--capability-list-uri", help="Add a root rel=resourcesync link.")
@click.option("--document", "documents", multiple=True, metavar="CAPABILITY=URI",
              help="Capability list entry (repeatable).")
@click.option("--describedby", help="Source description URI (capabilitylist).")
def cmd_generate(kind, dir_, base_url, old, new, out, algorithm, snapshot, modified,
                 capability_list_uri, documents, describedby):
    """Generate a resourcelist, changelist or capabilitylist."""
    try:
        if kind == "capabilitylist":
            pairs = []
            for spec in documents:
                cap, sep, uri = spec.partition("=")
                if not sep or cap not in {c.value for c in Capability}:
                    raise click.UsageError(f"--document expects CAPABILITY=URI, got {spec!r}")
                pairs.append((Capability(cap), uri))
            doc = generator.build_capability_list(pairs, describedby, modified)
        elif kind == "resourcelist":
            if not dir_ or not base_url:
                raise click.UsageError("resourcelist needs --dir and --base-url")
            snap = generator.scan(dir_, algorithm)
            snap_path = _default_snapshot_path(snapshot, out)
            if snap_path:
                generator.save_snapshot(snap, snap_path)
            doc = generator.build_resource_list(snap, base_url, modified,
                                                capability_list_uri=capability_list_uri)
        else:
            if not old:
                raise click.UsageError("changelist needs --old-snapshot")
            if not base_url:
                raise click.UsageError("changelist needs --base-url")
            if not new and not dir_:
                raise click.UsageError("changelist needs --new-snapshot or --dir")
            old_snap = generator.read_snapshot(old)
            if new:
                new_snap = generator.read_snapshot(new)
            else:
                new_snap = generator.scan(dir_, old_snap.algorithm)
                snap_path = _default_snapshot_path(snapshot, out)
                if snap_path:
                    generator.save_snapshot(new_snap, snap_path)
            changes = generator.diff(old_snap, new_snap)
            doc = generator.build_change_list(changes, base_url,
                                              modified or new_snap.taken_at,
                                              capability_list_uri=capability_list_uri)
        _emit(codec.serialize(doc), out)
    except click.UsageError:
        raise
    except IoFailure as exc:
        _fail(f"error: {exc}", ExitCode.VALIDATION_ERRORS)
    except (OSError, ValueError, ResyncError) as exc:
        # missing snapshot files, bad base URLs, malformed snapshots
        _fail(f"error: {exc}", ExitCode.USAGE)


@main.command("diff")
@click.argument("old", type=click.Path(exists=True, dir_okay=False))
@click.argument("new", type=click.Path(exists=True, dir_okay=False))
def cmd_diff(old, new):
    """Print the changes between two snapshot files, one per line."""
    try:
        changes = generator.diff(generator.read_snapshot(old), generator.read_snapshot(new))
    except ResyncError as exc:
        _fail(f"error: {exc}", ExitCode.USAGE)
    for rec in changes:
        click.echo(f"{rec.change.value} {rec.path}")


@main.command("discover")
@click.option("--source", required=True, help="Any URI on the Source.")
@click.option("--robots", is_flag=True, help="Also list Sitemaps declared in robots.txt.")
@network_options
def cmd_discover(source, robots, timeout, jobs):
    """Locate the Source's capability list via its well-known URI."""
    fetcher = transport.HttpFetcher()
    try:
        caplist, describedby = transport.discover(source, fetcher, timeout=timeout)
    except ResyncError as exc:
        _fail(f"error: {exc}", ExitCode.TRANSPORT)
    for entry in caplist.entries:
        click.echo(f"{entry.md.capability.value} {entry.loc}")
    if describedby:
        click.echo(f"describedby {describedby}")
    if robots:
        for uri in transport.discover_sitemaps_via_robots(source, fetcher, timeout=timeout):
            click.echo(f"sitemap {uri}")


@main.command("sync")
@click.argument("mode", type=click.Choice(["baseline", "incremental"]))
@click.option("--source", required=True, help="Any URI on the Source.")
@click.option("--dest", required=True, type=click.Path(file_okay=False),
              help="Destination store directory.")
@network_options
def cmd_sync(mode, source, dest, timeout, jobs):
    """Synchronize DEST against SOURCE; prints OK|FAIL <kind> <uri> per action."""
    fetcher = transport.HttpFetcher()
    try:
        store = sync.LocalStore(dest)
        report = sync.sync_source(mode, source, store, fetcher, jobs=jobs, timeout=timeout)
    except StoreError as exc:
        _fail(f"error: {exc}", ExitCode.USAGE)
    except ResyncError as exc:
        _fail(f"error: {exc}", ExitCode.TRANSPORT)
    for line in report.lines():
        click.echo(line)
    sys.exit(ExitCode.OK if report.ok else ExitCode.SYNC_FAILURES)


def _load_list(against: str, timeout: float):
    if against.startswith(("http://", "https://")):
        return transport.fetch_document(against, transport.HttpFetcher(), timeout=timeout)
    path = Path(against)
    if not path.is_file():
        raise click.UsageError(f"no such resource list: {against}")
    doc, _ = codec.parse(path.read_bytes(), codec.ParseMode.TOLERANT)
    return doc


def audit_lines(store: sync.LocalStore, resource_list) -> list[str]:
    """Compare stored files with a resource list; one line per problem."""
    lines = []
    listed = set()
    for entry in resource_list.entries:
        if entry.loc in listed:
            continue
        listed.add(entry.loc)
        rec = store.manifest.get(entry.loc)
        if rec is None:
            lines.append(f"MISSING {entry.loc}")
            continue
        want_hash = entry.md.hash if entry.md and entry.md.hash else rec.hash
        want_length = entry.md.length if entry.md and entry.md.length is not None else rec.length
        try:
            length, digest = hash_file(store.file_for(rec.path), want_hash.algorithm)
        except OSError:
            lines.append(f"MISMATCH {entry.loc} file missing: {rec.path}")
            continue
        problems = []
        if length != want_length:
            problems.append(f"length {length} != {want_length}")
        if digest != want_hash:
            problems.append(f"hash {digest} != {want_hash}")
        if problems:
            lines.append(f"MISMATCH {entry.loc} " + "; ".join(problems))
    for uri in sorted(set(store.manifest) - listed):
        lines.append(f"EXTRA {uri}")
    return lines


@main.command("audit")
@click.option("--dest", required=True, type=click.Path(file_okay=False),
              help="Destination store directory.")
@click.option("--against", required=True, help="Resource list file or URI.")
@network_options
def cmd_audit(dest, against, timeout, jobs):
    """Re-hash every stored file and compare with a resource list."""
    store_root = Path(dest)
    if not (store_root / sync.MANIFEST_NAME).is_file():
        _fail(f"error: no manifest in {dest}", ExitCode.USAGE)
    try:
        store = sync.LocalStore(store_root)
        resource_list = _load_list(against, timeout)
    except click.UsageError:
        raise
    except (XmlSyntax, SchemaViolation, StoreError) as exc:
        _fail(f"error: {exc}", ExitCode.USAGE)
    except ResyncError as exc:
        _fail(f"error: {exc}", ExitCode.TRANSPORT)
    lines = audit_lines(store, resource_list)
    for line in lines:
        click.echo(line)
    sys.exit(ExitCode.VALIDATION_ERRORS if lines else ExitCode.OK)


if __name__ == "__main__":
    main()
