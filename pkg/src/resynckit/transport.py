"""HTTP fetching and Capability List discovery.

Fetchers perform exactly one GET and never follow redirects themselves;
``fetch`` owns redirect handling so the behaviour is the same for the real
HTTP fetcher and for test doubles.
"""

from __future__ import annotations

import logging
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Optional, Protocol
from urllib.parse import urljoin, urlsplit

import requests

from .codec import ParseMode, parse
from .errors import (
    InvalidBase,
    NotFound,
    ParseFailure,
    ResyncError,
    SchemaViolation,
    Timeout,
    TooManyRedirects,
    TransportFailure,
    WrongCapability,
    XmlSyntax,
)
from .model import Capability, Document, is_absolute_uri

log = logging.getLogger(__name__)

WELL_KNOWN_PATH = "/.well-known/resourcesync"
DEFAULT_TIMEOUT = 30.0
MAX_REDIRECTS = 5
DEFAULT_USER_AGENT = "resync-toolkit/1.0"

REDIRECT_STATUSES = {301, 302, 303, 307, 308}


@dataclass(frozen=True)
class Response:
    """A single, unfollowed HTTP response."""

    status: int
    body: bytes = b""
    headers: dict = field(default_factory=dict)

    def header(self, name: str) -> Optional[str]:
        name = name.lower()
        for key, value in self.headers.items():
            if key.lower() == name:
                return value
        return None


class Fetcher(Protocol):
    def get(self, uri: str, timeout: float) -> Response:
        """GET ``uri`` without following redirects.

        Raises ``Timeout`` or ``TransportFailure``. Must be safe to call
        from several threads at once.
        """


def user_agent() -> str:
    return os.environ.get("RESYNC_USER_AGENT", DEFAULT_USER_AGENT)


class HttpFetcher:
    """``requests``-backed fetcher with one session per thread."""

    def __init__(self, user_agent_string: Optional[str] = None):
        self.user_agent = user_agent_string or user_agent()
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            session.headers["User-Agent"] = self.user_agent
            self._local.session = session
        return session

    def get(self, uri: str, timeout: float) -> Response:
        try:
            r = self._session().get(uri, timeout=timeout, allow_redirects=False)
        except requests.Timeout as exc:
            raise Timeout(f"timed out fetching {uri}") from exc
        except requests.RequestException as exc:
            raise TransportFailure(f"cannot fetch {uri}: {exc}") from exc
        return Response(status=r.status_code, body=r.content, headers=dict(r.headers))


@dataclass(frozen=True)
class FetchResult:
    final_uri: str
    status: int
    body: Optional[bytes]
    content_type: Optional[str] = None

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300


def fetch(uri: str, fetcher: Fetcher, *, timeout: float = DEFAULT_TIMEOUT,
          max_redirects: int = MAX_REDIRECTS, retries: int = 1) -> FetchResult:
    if not is_absolute_uri(uri):
        raise TransportFailure(f"not an absolute URI: {uri!r}")
    current = uri
    redirects = 0
    while True:
        for attempt in range(retries + 1):
            try:
                resp = fetcher.get(current, timeout)
                break
            except TransportFailure:
                if attempt == retries:
                    raise
                log.debug("retrying %s after transport failure", current)
        location = resp.header("Location")
        if resp.status in REDIRECT_STATUSES and location:
            redirects += 1
            if redirects > max_redirects:
                raise TooManyRedirects(f"more than {max_redirects} redirects from {uri}")
            current = urljoin(current, location)
            continue
        ok = 200 <= resp.status < 300
        content_type = resp.header("Content-Type")
        if content_type:
            content_type = content_type.split(";")[0].strip() or None
        return FetchResult(final_uri=current, status=resp.status,
                           body=resp.body if ok else None, content_type=content_type)


# -- discovery -------------------------------------------------------------


def origin(base: str) -> str:
    try:
        parts = urlsplit(base)
    except ValueError as exc:
        raise InvalidBase(f"not a URI: {base!r}") from exc
    if not parts.scheme or not parts.netloc or any(c.isspace() for c in base):
        raise InvalidBase(f"base must have a scheme and authority: {base!r}")
    return f"{parts.scheme.lower()}://{parts.netloc}"


def well_known_uri(base: str) -> str:
    return origin(base) + WELL_KNOWN_PATH


def fetch_document(uri: str, fetcher: Fetcher, *, timeout: float = DEFAULT_TIMEOUT) -> Document:
    """Fetch and tolerant-parse a capability document."""
    result = fetch(uri, fetcher, timeout=timeout)
    if not result.ok:
        raise NotFound(uri, result.status)
    try:
        doc, warnings = parse(result.body, ParseMode.TOLERANT)
    except (XmlSyntax, SchemaViolation) as exc:
        raise ParseFailure(f"{result.final_uri}: {exc}") from exc
    for w in warnings:
        log.info("%s: %s", result.final_uri, w)
    return doc


def _describedby(doc: Document) -> Optional[str]:
    links = doc.links_with_rel("describedby")
    return links[0].href if links else None


def discover(base: str, fetcher: Fetcher, *,
             timeout: float = DEFAULT_TIMEOUT) -> tuple[Document, Optional[str]]:
    """Find the Source's Capability List starting at its well-known URI.

    A document found there that is not a capability list may point at one
    with a root ``rel="resourcesync"`` link; that link is followed once.
    Returns the capability list and the Source's ``describedby`` URI, if any.
    """
    first = fetch_document(well_known_uri(base), fetcher, timeout=timeout)
    if first.capability is Capability.CAPABILITYLIST and not first.capability_inferred:
        return first, _describedby(first)
    nav = first.links_with_rel("resourcesync")
    if not nav:
        raise WrongCapability(
            f"well-known URI serves a {first.capability.value} with no resourcesync link")
    caplist = fetch_document(nav[0].href, fetcher, timeout=timeout)
    if caplist.capability is not Capability.CAPABILITYLIST:
        raise WrongCapability(f"{nav[0].href} is a {caplist.capability.value}, not a capabilitylist")
    return caplist, _describedby(caplist) or _describedby(first)


def capability_documents(caplist: Document) -> dict[Capability, str]:
    """Map each advertised capability to its document URI."""
    return {e.md.capability: e.loc for e in caplist.entries if e.md and e.md.capability}


_SITEMAP_LINE = re.compile(r"^\s*sitemap\s*:(.*)$", re.IGNORECASE)


def parse_robots_sitemaps(text: str) -> list[str]:
    found = []
    for line in text.splitlines():
        m = _SITEMAP_LINE.match(line)
        if m:
            value = m.group(1).strip()
            if is_absolute_uri(value):
                found.append(value)
    return found


def discover_sitemaps_via_robots(base: str, fetcher: Fetcher, *,
                                 timeout: float = DEFAULT_TIMEOUT) -> list[str]:
    """Sitemap URIs declared in robots.txt; empty on any failure."""
    try:
        result = fetch(origin(base) + "/robots.txt", fetcher, timeout=timeout)
    except ResyncError as exc:
        log.debug("robots.txt unavailable for %s: %s", base, exc)
        return []
    if not result.ok:
        return []
    return parse_robots_sitemaps(result.body.decode("utf-8", errors="replace"))
