import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from urllib.parse import quote

import pytest

from resynckit import codec, generator
from resynckit.errors import TransportFailure
from resynckit.model import PATCH_REL, Capability, Ln
from resynckit.transport import Response


SAMPLES = ("plain", "legacy_metadata", "legacy_links", "root_md", "root_links", "changelist")


def sample(name: str) -> bytes:
    return resources.files("resynckit").joinpath(f"fixtures/{name}.xml").read_bytes()


@pytest.fixture
def samples():
    return {name: sample(name) for name in SAMPLES}


@dataclass
class Route:
    status: int = 200
    body: bytes = b""
    headers: dict = field(default_factory=dict)


class StubServer:
    """Threaded HTTP server answering from a path -> Route table."""

    def __init__(self):
        self.routes: dict[str, Route] = {}
        self.requests: list[str] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                with stub._lock:
                    stub.requests.append(self.path)
                route = stub.routes.get(self.path, Route(404, b"not found"))
                self.send_response(route.status)
                for k, v in route.headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(route.body)))
                self.end_headers()
                self.wfile.write(route.body)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def add(self, path, body=b"", status=200, content_type=None, **headers):
        if isinstance(body, str):
            body = body.encode()
        if content_type:
            headers["Content-Type"] = content_type
        self.routes[path] = Route(status, body, headers)

    def redirect(self, path, location, status=301):
        self.routes[path] = Route(status, b"", {"Location": location})

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    with StubServer() as server:
        yield server


class DictFetcher:
    """In-memory fetcher: uri -> Response, or an exception to raise."""

    def __init__(self, table=None):
        self.table = dict(table or {})
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def add(self, uri, body=b"", status=200, headers=None):
        if isinstance(body, str):
            body = body.encode()
        self.table[uri] = Response(status=status, body=body, headers=headers or {})

    def get(self, uri, timeout):
        with self._lock:
            self.calls.append(uri)
        hit = self.table.get(uri)
        if hit is None:
            return Response(status=404, body=b"")
        if isinstance(hit, Exception):
            raise hit
        return hit


@pytest.fixture
def dict_fetcher():
    return DictFetcher()


class FlakyFetcher(DictFetcher):
    """Fails the first ``failures`` calls with TransportFailure."""

    def __init__(self, table=None, failures=1):
        super().__init__(table)
        self.failures = failures

    def get(self, uri, timeout):
        if self.failures > 0:
            self.failures -= 1
            with self._lock:
                self.calls.append(uri)
            raise TransportFailure("connection reset")
        return super().get(uri, timeout)


def publish(server: StubServer, content_dir, *, old_snapshot=None, patches=None):
    """Serve ``content_dir`` as a Source and return its fresh snapshot.

    Files go under ``/data/``; the capability list sits at the well-known
    path. With ``old_snapshot`` a change list against it is published too;
    ``patches`` maps a relative path to JSON Patch bytes served alongside.
    """
    base = server.url + "/data/"
    caplist_uri = server.url + "/.well-known/resourcesync"
    snap = generator.scan(content_dir)
    for path in snap.records:
        server.add("/data/" + quote(path), (content_dir / path).read_bytes())
    rl = generator.build_resource_list(snap, base, capability_list_uri=caplist_uri)
    server.add("/resourcelist.xml", codec.serialize(rl), content_type="application/xml")
    docs = [(Capability.RESOURCELIST, server.url + "/resourcelist.xml")]
    if old_snapshot is not None:
        links = {}
        for path, body in (patches or {}).items():
            server.add(f"/patches/{path}", body, content_type="application/json-patch")
            links[path] = [Ln(PATCH_REL, f"{server.url}/patches/{path}",
                              "application/json-patch")]
        cl = generator.build_change_list(generator.diff(old_snapshot, snap), base,
                                         snap.taken_at, links=links,
                                         capability_list_uri=caplist_uri)
        server.add("/changelist.xml", codec.serialize(cl), content_type="application/xml")
        docs.append((Capability.CHANGELIST, server.url + "/changelist.xml"))
    caplist = generator.build_capability_list(docs, server.url + "/about.xml")
    server.add("/.well-known/resourcesync", codec.serialize(caplist),
               content_type="application/xml")
    return snap
