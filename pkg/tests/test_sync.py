import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resynckit import generator
from resynckit.codec import parse
from resynckit.errors import PatchFailure, StoreError, StoreLocked, UnknownChangeToken, WrongCapability
from resynckit.fixity import hash_bytes
from resynckit.model import PATCH_REL, Capability, ChangeType, Document, Entry, Hash, Ln, Md
from resynckit.sync import (
    ActionKind,
    Expected,
    LocalStore,
    Outcome,
    SyncAction,
    apply_json_patch,
    audit_bytes,
    canonical_json,
    execute,
    plan_baseline,
    plan_incremental,
    select_fetch_uri,
    uri_to_path,
)

from conftest import DictFetcher

UTC = timezone.utc
T0 = datetime(2013, 1, 2, 13, 0, tzinfo=UTC)
HELLO = b"hello world\n"
HELLO_MD5 = "6f5902ac237024bdd0c176cb93063dc4"
# md5 of b'{"a":2}', the result of replacing /a in {"a":1}
PATCHED_MD5 = "aab457e0ec244f477ee0c097b94a2728"


def md(body, change=None):
    return Md(change=change, length=len(body), hash=hash_bytes(body))


def rlist(*entries):
    return Document(Capability.RESOURCELIST, entries=tuple(entries))


def clist(*entries):
    return Document(Capability.CHANGELIST, entries=tuple(entries))


def kinds(plan):
    return [(a.kind.value, a.target_uri) for a in plan]


@pytest.fixture
def store(tmp_path):
    return LocalStore(tmp_path / "dest")


def _baseline(store, fetcher, items):
    """Sync ``{uri: body}`` into the store via a resource list."""
    for uri, body in items.items():
        fetcher.add(uri, body)
    doc = rlist(*(Entry(u, lastmod=T0, md=md(b)) for u, b in items.items()))
    return execute(plan_baseline(doc, store), store, fetcher, jobs=2)


# -- planning --------------------------------------------------------------


def test_plan_baseline_empty_store(store):
    doc = rlist(Entry("http://example.com/a", md=md(b"a")), Entry("http://example.com/b"))
    assert kinds(plan_baseline(doc, store)) == [("download", "http://example.com/a"),
                                                ("download", "http://example.com/b")]


def test_plan_baseline_needs_resourcelist(store, samples):
    with pytest.raises(WrongCapability):
        plan_baseline(parse(samples["changelist"], "strict")[0], store)


def test_plan_baseline_skip_change_delete(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/a": b"a", "http://example.com/b": b"b",
                                    "http://example.com/c": b"c"})
    doc = rlist(Entry("http://example.com/a", md=md(b"a")),
                Entry("http://example.com/b", md=md(b"B")))
    plan = plan_baseline(doc, store)
    assert kinds(plan) == [("skip", "http://example.com/a"), ("download", "http://example.com/b"),
                           ("delete", "http://example.com/c")]
    assert plan[1].reason == "changed"


def test_plan_baseline_lastmod_fallback_without_hash(store, dict_fetcher):
    dict_fetcher.add("http://example.com/a", b"a")
    execute(plan_baseline(rlist(Entry("http://example.com/a", lastmod=T0)), store), store,
            dict_fetcher)
    assert kinds(plan_baseline(rlist(Entry("http://example.com/a", lastmod=T0)), store)) == [
        ("skip", "http://example.com/a")]
    later = datetime(2014, 1, 1, tzinfo=UTC)
    assert kinds(plan_baseline(rlist(Entry("http://example.com/a", lastmod=later)), store)) == [
        ("download", "http://example.com/a")]


def test_plan_incremental_changelist_patch(store, dict_fetcher, samples):
    _baseline(store, dict_fetcher, {"http://example.com/res1": b"{}"})
    (action,) = plan_incremental(parse(samples["changelist"], "strict")[0], store)
    assert action.kind is ActionKind.PATCH
    assert action.fetch_uri == "http://example.com/res1-json-patch"
    assert action.fallback_uris == ("http://mirror.example.com/res1", "http://example.com/res1")
    assert action.expected == Expected(6230, Hash("md5", "a2f94c567f9b370c43fb1188f1f46330"),
                                       "text/html")


def test_plan_incremental_changelist_without_local_copy(store, samples):
    (action,) = plan_incremental(parse(samples["changelist"], "strict")[0], store)
    assert action.kind is ActionKind.DOWNLOAD
    assert action.fetch_uri == "http://mirror.example.com/res1"
    assert action.fallback_uris == ("http://example.com/res1",)


def test_plan_incremental_last_entry_wins(store):
    doc = clist(Entry("http://example.com/a", md=Md(change=ChangeType.CREATED)),
                Entry("http://example.com/b", md=Md(change=ChangeType.CREATED)),
                Entry("http://example.com/a", md=Md(change=ChangeType.DELETED)))
    assert kinds(plan_incremental(doc, store)) == [("download", "http://example.com/b"),
                                                   ("delete", "http://example.com/a")]


_events = st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from(list(ChangeType))),
                   max_size=12)


@given(_events)
def test_plan_incremental_collapses_to_last_change(events):
    store = LocalStore("/nonexistent-store")
    doc = clist(*(Entry(f"http://example.com/{u}", md=Md(change=c)) for u, c in events))
    last = {}
    for i, (u, c) in enumerate(events):
        last[u] = (i, c)
    expected = [("delete" if c is ChangeType.DELETED else "download", f"http://example.com/{u}")
                for u, (i, c) in sorted(last.items(), key=lambda kv: kv[1][0])]
    assert kinds(plan_incremental(doc, store)) == expected


def test_plan_incremental_unknown_change(store):
    data = (b'<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9" '
            b'xmlns:rs="http://www.openarchives.org/rs/terms/"><rs:md capability="changelist"/>'
            b'<url><loc>http://example.com/a</loc><rs:md change="moved"/></url></urlset>')
    doc = parse(data, "tolerant")[0]
    with pytest.raises(UnknownChangeToken) as exc:
        plan_incremental(doc, store)
    assert exc.value.token == "moved"
    assert kinds(plan_incremental(doc, store, strict=False)) == [("skip", "http://example.com/a")]


def test_plan_incremental_needs_changelist(store, samples):
    with pytest.raises(WrongCapability):
        plan_incremental(parse(samples["root_md"], "strict")[0], store)


@pytest.mark.parametrize("change,present,expected", [
    (ChangeType.UPDATED, True, (ActionKind.PATCH, "http://example.com/p")),
    (ChangeType.UPDATED, False, (ActionKind.DOWNLOAD, "http://m.example.com/a")),
    (ChangeType.CREATED, True, (ActionKind.DOWNLOAD, "http://m.example.com/a")),
])
def test_select_fetch_uri(change, present, expected):
    entry = Entry("http://example.com/a", md=Md(change=change),
                  links=(Ln(PATCH_REL, "http://example.com/p"),
                         Ln("duplicate", "http://m.example.com/a")))
    assert select_fetch_uri(entry, present) == expected


def test_select_fetch_uri_defaults_to_loc():
    assert select_fetch_uri(Entry("http://example.com/a"), True) == (
        ActionKind.DOWNLOAD, "http://example.com/a")


def test_sync_action_invariants():
    with pytest.raises(ValueError):
        SyncAction(ActionKind.DELETE, "http://example.com/a", "http://example.com/a")
    with pytest.raises(ValueError):
        SyncAction(ActionKind.DOWNLOAD, "http://example.com/a")


# -- fixity and patches ----------------------------------------------------


def test_audit_bytes():
    good = Expected(12, Hash("md5", HELLO_MD5), "text/plain")
    assert audit_bytes(HELLO, good)
    assert audit_bytes(HELLO, None)
    bad = audit_bytes(b"hello world!", good)
    assert not bad and len(bad.problems) == 1 and "hash" in bad.problems[0]
    short = audit_bytes(b"hello", good)
    assert len(short.problems) == 2
    typed = audit_bytes(HELLO, good, "text/html")
    assert typed.passed and typed.warnings


def test_apply_json_patch():
    assert apply_json_patch(b'{"a":1}', b'[{"op":"replace","path":"/a","value":2}]') == b'{"a":2}'
    assert apply_json_patch(b'{"a": 1}', b"[]") == b'{"a":1}'
    assert hash_bytes(b'{"a":2}').digest == PATCHED_MD5
    out = apply_json_patch(b'{"b": [1], "a": 0}', b'[{"op":"add","path":"/b/-","value":"\xc3\xa9"}]')
    assert out == '{"a":0,"b":[1,"é"]}'.encode()


@pytest.mark.parametrize("original,patch", [
    (b"not json", b"[]"),
    (b"{}", b"nope"),
    (b"{}", b'{"op":"add"}'),
    (b"{}", b'[{"op":"remove","path":"/missing"}]'),
    (b"{}", b'[{"op":"test","path":"/a","value":1}]'),
    (b"{}", b'[{"op":"frobnicate","path":"/a"}]'),
])
def test_apply_json_patch_failures(original, patch):
    with pytest.raises(PatchFailure):
        apply_json_patch(original, patch)


_json = st.recursive(st.none() | st.booleans() | st.integers() | st.text(max_size=5),
                     lambda inner: st.lists(inner, max_size=3)
                     | st.dictionaries(st.text(max_size=3), inner, max_size=3), max_leaves=8)


@settings(max_examples=100)
@given(_json, _json)
def test_json_patch_reproduces_target(a, b):
    import jsonpatch
    patch = json.dumps(jsonpatch.make_patch(a, b).patch).encode()
    assert apply_json_patch(json.dumps(a).encode(), patch) == canonical_json(b)


# -- execution -------------------------------------------------------------


def test_execute_downloads_and_records(store, dict_fetcher):
    report = _baseline(store, dict_fetcher, {"http://example.com/x/hello.txt": HELLO})
    assert report.ok and report.lines() == ["OK download http://example.com/x/hello.txt"]
    assert (store.root / "x/hello.txt").read_bytes() == HELLO
    rec = LocalStore(store.root).manifest["http://example.com/x/hello.txt"]
    assert (rec.path, rec.length, rec.hash, rec.lastmod) == ("x/hello.txt", 12,
                                                             Hash("md5", HELLO_MD5), T0)
    assert not (store.root / ".resync-tmp").exists() and not store.lock_path.exists()


def test_execute_fixity_mismatch_is_not_installed(store, dict_fetcher):
    dict_fetcher.add("http://example.com/a", b"tampered")
    plan = plan_baseline(rlist(Entry("http://example.com/a", md=md(HELLO))), store)
    report = execute(plan, store, dict_fetcher)
    (result,) = report.actions_executed
    assert result.outcome is Outcome.FIXITY_MISMATCH
    assert report.audit_failures == ["http://example.com/a"]
    assert not (store.root / "a").exists()
    assert store.manifest == {}
    assert report.lines() == ["FAIL download http://example.com/a"]


def test_execute_fetch_failure(store, dict_fetcher):
    report = execute(plan_baseline(rlist(Entry("http://example.com/a")), store), store,
                     dict_fetcher)
    assert report.actions_executed[0].outcome is Outcome.FETCH_FAILED and not report.ok


def test_execute_mirror_fallback(store, dict_fetcher):
    dict_fetcher.add("http://example.com/a", HELLO)  # mirror missing
    entry = Entry("http://example.com/a", md=md(HELLO),
                  links=(Ln("duplicate", "http://mirror.example.com/a"),))
    report = execute(plan_baseline(rlist(entry), store), store, dict_fetcher)
    assert report.actions_executed[0].fetched_uri == "http://example.com/a"
    assert dict_fetcher.calls == ["http://mirror.example.com/a", "http://example.com/a"]


def test_execute_patch(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/d.json": b'{"a":1}'})
    dict_fetcher.add("http://example.com/d.patch", b'[{"op":"replace","path":"/a","value":2}]')
    entry = Entry("http://example.com/d.json",
                  md=Md(change=ChangeType.UPDATED, length=7, hash=Hash("md5", PATCHED_MD5)),
                  links=(Ln(PATCH_REL, "http://example.com/d.patch"),))
    report = execute(plan_incremental(clist(entry), store), store, dict_fetcher)
    (result,) = report.actions_executed
    assert result.ok and result.fetched_uri == "http://example.com/d.patch"
    assert (store.root / "d.json").read_bytes() == b'{"a":2}'
    assert store.manifest["http://example.com/d.json"].hash == Hash("md5", PATCHED_MD5)


def test_execute_bad_patch_falls_back_to_download(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/d.json": b'{"a":1}'})
    dict_fetcher.add("http://example.com/d.patch", b'[{"op":"remove","path":"/zzz"}]')
    dict_fetcher.add("http://example.com/d.json", b'{"a":2}')
    entry = Entry("http://example.com/d.json",
                  md=Md(change=ChangeType.UPDATED, hash=Hash("md5", PATCHED_MD5)),
                  links=(Ln(PATCH_REL, "http://example.com/d.patch"),))
    report = execute(plan_incremental(clist(entry), store), store, dict_fetcher)
    assert report.ok
    assert report.actions_executed[0].fetched_uri == "http://example.com/d.json"
    assert (store.root / "d.json").read_bytes() == b'{"a":2}'


def test_execute_patch_and_download_failing_reports_patch_failure(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/d.json": b'{"a":1}'})
    del dict_fetcher.table["http://example.com/d.json"]
    entry = Entry("http://example.com/d.json", md=Md(change=ChangeType.UPDATED),
                  links=(Ln(PATCH_REL, "http://example.com/d.patch"),))
    report = execute(plan_incremental(clist(entry), store), store, dict_fetcher)
    assert report.actions_executed[0].outcome is Outcome.PATCH_FAILED
    assert (store.root / "d.json").read_bytes() == b'{"a":1}'


def test_execute_delete_prunes_directories(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/deep/dir/a": b"a"})
    report = execute(plan_incremental(clist(Entry("http://example.com/deep/dir/a",
                                                  md=Md(change=ChangeType.DELETED))), store),
                     store, dict_fetcher)
    assert report.ok and not (store.root / "deep").exists()
    assert store.manifest == {}


def test_baseline_is_idempotent(store, dict_fetcher):
    items = {f"http://example.com/f{i}": bytes([i]) * i for i in range(5)}
    _baseline(store, dict_fetcher, items)
    before = {p: p.read_bytes() for p in store.root.rglob("*") if p.is_file()}
    doc = rlist(*(Entry(u, lastmod=T0, md=md(b)) for u, b in items.items()))
    plan = plan_baseline(doc, store)
    assert {a.kind for a in plan} == {ActionKind.SKIP}
    calls = len(dict_fetcher.calls)
    execute(plan, store, dict_fetcher)
    assert len(dict_fetcher.calls) == calls
    after = {p: p.read_bytes() for p in store.root.rglob("*") if p.is_file()}
    assert after == before


def test_lock_is_exclusive(store, dict_fetcher):
    with store.lock():
        with pytest.raises(StoreLocked):
            execute([], store, dict_fetcher)
    execute([], store, dict_fetcher)


def test_manifest_survives_reload_with_awkward_uris(store, dict_fetcher):
    _baseline(store, dict_fetcher, {"http://example.com/a%20b/c%25d.txt": b"x"})
    reloaded = LocalStore(store.root)
    assert reloaded.manifest == store.manifest
    assert (store.root / "a b" / "c%d.txt").exists()
    assert reloaded.audit() == []
    (store.root / "a b" / "c%d.txt").write_bytes(b"y")
    assert reloaded.audit() == ["http://example.com/a%20b/c%25d.txt"]


@pytest.mark.parametrize("uri", ["http://example.com/a/../../etc/passwd",
                                 "http://example.com/%2e%2e/x",
                                 "http://example.com/",
                                 "http://example.com/.resync-manifest"])
def test_uri_to_path_rejects(uri):
    with pytest.raises(StoreError):
        uri_to_path(uri)


def test_path_traversal_never_writes_outside(store, dict_fetcher, tmp_path):
    dict_fetcher.add("http://example.com/%2e%2e/evil", b"x")
    report = execute(plan_baseline(rlist(Entry("http://example.com/%2e%2e/evil")), store), store,
                     dict_fetcher)
    assert not report.ok
    assert not (tmp_path / "evil").exists()


def test_path_collision_is_reported(store, dict_fetcher):
    dict_fetcher.add("http://example.com/a", b"1")
    dict_fetcher.add("http://other.example.com/a", b"2")
    doc = rlist(Entry("http://example.com/a"), Entry("http://other.example.com/a"))
    report = execute(plan_baseline(doc, store), store, dict_fetcher)
    assert [r.ok for r in report.actions_executed] == [True, False]
    assert (store.root / "a").read_bytes() == b"1"


def test_interrupted_install_leaves_no_partial_file(store, dict_fetcher, monkeypatch):
    _baseline(store, dict_fetcher, {"http://example.com/a": b"old"})
    dict_fetcher.add("http://example.com/a", b"new")

    def boom(*args):
        raise OSError("disk on fire")

    monkeypatch.setattr(os, "replace", boom)
    plan = plan_baseline(rlist(Entry("http://example.com/a", md=md(b"new"))), store)
    with pytest.raises(OSError):
        execute(plan, store, dict_fetcher)
    monkeypatch.undo()
    assert (store.root / "a").read_bytes() == b"old"
    assert not store.lock_path.exists()
    assert not (store.root / ".resync-tmp").exists()


_trees = st.dictionaries(st.sampled_from(["a", "b", "c/d", "c/e", "f.json"]),
                         st.sampled_from([b"1", b"22", b"333", b'{"x":1}']), max_size=5)


def _tree_store(tmp, tree, fetcher, base="http://example.com/"):
    """Write ``tree`` to a source dir and register its files with ``fetcher``."""
    src = tmp / "src"
    src.mkdir(exist_ok=True)
    for p in list(src.rglob("*")):
        if p.is_file():
            p.unlink()
    for rel, body in tree.items():
        (src / rel).parent.mkdir(parents=True, exist_ok=True)
        (src / rel).write_bytes(body)
        fetcher.add(base + rel, body)
    return generator.scan(src)


@settings(max_examples=50, deadline=None)
@given(_trees, _trees)
def test_incremental_equals_baseline(tree_a, tree_b):
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fetcher = DictFetcher()
        snap_a = _tree_store(tmp, tree_a, fetcher)
        one = LocalStore(tmp / "one")
        execute(plan_baseline(generator.build_resource_list(snap_a, "http://example.com/"), one),
                one, fetcher)
        fetcher.table.clear()
        snap_b = _tree_store(tmp, tree_b, fetcher)
        cl = generator.build_change_list(generator.diff(snap_a, snap_b), "http://example.com/")
        assert execute(plan_incremental(cl, one), one, fetcher).ok
        two = LocalStore(tmp / "two")
        execute(plan_baseline(generator.build_resource_list(snap_b, "http://example.com/"), two),
                two, fetcher)

        def files(store):
            return {p.relative_to(store.root).as_posix(): p.read_bytes()
                    for p in store.root.rglob("*")
                    if p.is_file() and not p.name.startswith(".resync-")}

        assert files(one) == files(two) == tree_b
        assert {u: (r.path, r.hash) for u, r in one.manifest.items()} == \
            {u: (r.path, r.hash) for u, r in two.manifest.items()}
