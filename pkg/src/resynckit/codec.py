"""Parse and serialize capability documents as Sitemap XML.

``parse`` understands the adopted format (root and entry ``rs:md`` /
``rs:ln``) and, in tolerant mode, the older experimental forms: ``rs:change``
on ``<lastmod>``, ``rs:size``/``rs:fixity``/``rs:mimetype`` elements,
``rs:link`` and ``xhtml:link``, attributes on ``<loc>``. Anything outside the
adopted format is kept as a ``ForeignNode`` and reported as a
``ParseWarning``. Strict mode turns every such warning into a
``SchemaViolation``.

``serialize`` always writes the canonical form and never emits foreign
nodes.
"""

from __future__ import annotations

import enum
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import Optional
from xml.sax.saxutils import escape

from defusedxml import DefusedXmlException
from defusedxml.ElementTree import fromstring

from .errors import (
    CapacityExceeded,
    InvariantViolation,
    MalformedHash,
    SchemaViolation,
    UnknownCapability,
    XmlSyntax,
)
from .model import (
    MAX_ENTRIES,
    MAX_SERIALIZED_BYTES,
    Capability,
    ChangeType,
    Document,
    Entry,
    ForeignNode,
    Ln,
    Md,
    format_datetime,
    is_absolute_uri,
    parse_datetime,
    parse_hash,
)

SITEMAP_NS = "http://www.sitemaps.org/schemas/sitemap/0.9"
RS_NS = "http://www.openarchives.org/rs/terms/"
XHTML_NS = "http://www.w3.org/1999/xhtml"

_PREFIXES = {SITEMAP_NS: "", RS_NS: "rs:", XHTML_NS: "xhtml:"}

LEGACY_METADATA = {"size", "fixity", "mimetype"}
SITEMAP_OPTIONAL = {"changefreq", "priority"}

XML_DECLARATION = '<?xml version="1.0" encoding="UTF-8"?>'


class ParseMode(str, enum.Enum):
    STRICT = "strict"
    TOLERANT = "tolerant"


@dataclass(frozen=True)
class ParseWarning:
    code: str
    locator: str
    message: str

    def __str__(self) -> str:
        return f"{self.code} {self.locator} {self.message}"


def _split(tag: str) -> tuple[Optional[str], str]:
    if tag.startswith("{"):
        ns, _, local = tag[1:].partition("}")
        return ns, local
    return None, tag


def display_name(tag: str) -> str:
    ns, local = _split(tag)
    if ns is None:
        return local
    prefix = _PREFIXES.get(ns)
    if prefix is None:
        return tag
    return prefix + local


class _Parser:
    def __init__(self):
        self.warnings: list[ParseWarning] = []
        self.nodes: list[ForeignNode] = []
        # warnings that strict mode lets through
        self.lenient: set[int] = set()

    def warn(self, code: str, locator: str, message: str) -> None:
        self.warnings.append(ParseWarning(code, locator, message))

    def keep_element(self, el, parent, locator, code, message, entry_index=None):
        ns, _ = _split(el.tag)
        self.nodes.append(ForeignNode(
            kind="element",
            name=display_name(el.tag),
            namespace=ns,
            parent=parent,
            locator=locator,
            entry_index=entry_index,
            value=(el.text or "").strip(),
            attributes=tuple(sorted((display_name(k), v) for k, v in el.attrib.items())),
            code=code,
        ))
        self.warn(code, locator, message)

    def keep_attribute(self, name, value, parent, locator, code, message, entry_index=None):
        ns, _ = _split(name)
        self.nodes.append(ForeignNode(
            kind="attribute",
            name=display_name(name),
            namespace=ns,
            parent=parent,
            locator=locator,
            entry_index=entry_index,
            value=value,
            code=code,
        ))
        self.warn(code, locator, message)

    # -- root ------------------------------------------------------------

    def parse_root(self, root) -> tuple[Document, list[ParseWarning]]:
        if root.tag != f"{{{SITEMAP_NS}}}urlset":
            raise SchemaViolation([ParseWarning(
                "not-a-urlset", "/", f"root element is {display_name(root.tag)!r}, not urlset")])
        for name, value in root.attrib.items():
            ns, _ = _split(name)
            if ns == "http://www.w3.org/2001/XMLSchema-instance":
                continue
            self.keep_attribute(name, value, "urlset", f"/urlset/@{display_name(name)}",
                                "foreign-attribute", f"attribute {display_name(name)} on urlset")

        capability = None
        modified = None
        root_links: list[Ln] = []
        seen_md = False
        counts: dict[str, int] = {}
        url_elements = []
        for el in root:
            if not isinstance(el.tag, str):
                continue  # comments, processing instructions
            name = display_name(el.tag)
            counts[name] = counts.get(name, 0) + 1
            locator = f"/urlset/{name}[{counts[name]}]"
            ns, local = _split(el.tag)
            if ns == SITEMAP_NS and local == "url":
                url_elements.append((el, locator))
            elif ns == RS_NS and local == "md":
                if seen_md:
                    self.keep_element(el, "urlset", locator, "duplicate-root-md",
                                      "more than one rs:md at root; keeping the first")
                    continue
                seen_md = True
                md = self.parse_root_md(el, locator)
                if md is not None:
                    capability, modified = md
            elif ns == RS_NS and local == "ln":
                ln = self.parse_ln(el, "urlset", locator)
                if ln is not None:
                    root_links.append(ln)
            else:
                self.keep_foreign(el, "urlset", locator)

        inferred = capability is None
        if inferred:
            capability = Capability.RESOURCELIST
            if not seen_md:
                if root_links:
                    self.lenient.add(len(self.warnings))
                self.warn("missing-root-md", "/urlset",
                          "no root rs:md; capability inferred as resourcelist")

        entries = []
        for el, locator in url_elements:
            entry = self.parse_entry(el, locator, len(entries), capability)
            if entry is not None:
                entries.append(entry)
        if len(entries) > MAX_ENTRIES:
            raise CapacityExceeded(f"{len(entries)} url entries exceeds limit of {MAX_ENTRIES}")

        doc = Document(
            capability=capability,
            modified=modified,
            root_links=tuple(root_links),
            entries=tuple(entries),
            extensions=tuple(self.nodes),
            capability_inferred=inferred,
        )
        return doc, self.warnings

    def parse_root_md(self, el, locator):
        attrs = dict(el.attrib)
        token = attrs.pop("capability", None)
        if token is None:
            self.keep_element(el, "urlset", locator, "missing-capability",
                              "root rs:md has no capability attribute")
            return None
        try:
            capability = Capability(token.strip())
        except ValueError:
            self.keep_element(el, "urlset", locator, "unknown-capability",
                              f"unrecognized capability {token!r}")
            return None
        modified = None
        raw = attrs.pop("modified", None)
        if raw is not None:
            try:
                modified = parse_datetime(raw)
            except ValueError:
                self.keep_attribute("modified", raw, "rs:md", f"{locator}/@modified",
                                    "invalid-attribute", f"modified is not a W3C datetime: {raw!r}")
        for name, value in attrs.items():
            code = "md-scope" if name in ("change", "length", "type", "hash") else "foreign-attribute"
            self.keep_attribute(name, value, "rs:md", f"{locator}/@{display_name(name)}", code,
                                f"attribute {display_name(name)} not allowed on root rs:md")
        return capability, modified

    def parse_ln(self, el, parent, locator, entry_index=None):
        attrs = dict(el.attrib)
        rel = attrs.pop("rel", None)
        href = attrs.pop("href", None)
        type_ = attrs.pop("type", None)
        try:
            ln = Ln(rel=(rel or "").strip(), href=(href or "").strip(),
                    type=type_.strip() if type_ is not None else None)
        except InvariantViolation as exc:
            self.keep_element(el, parent, locator, "invalid-link", str(exc), entry_index)
            return None
        for name, value in attrs.items():
            self.keep_attribute(name, value, "rs:ln", f"{locator}/@{display_name(name)}",
                                "foreign-attribute", f"attribute {display_name(name)} on rs:ln",
                                entry_index)
        return ln

    def keep_foreign(self, el, parent, locator, entry_index=None):
        ns, local = _split(el.tag)
        name = display_name(el.tag)
        if (ns == RS_NS and local == "link") or (ns == XHTML_NS and local == "link"):
            self.keep_element(el, parent, locator, "legacy-link-element",
                              f"{name} is a superseded link form; use rs:ln", entry_index)
        elif ns == RS_NS and local in LEGACY_METADATA and parent == "url":
            self.keep_element(el, parent, locator, "legacy-metadata-element",
                              f"{name} is a superseded metadata form; use rs:md", entry_index)
        else:
            self.keep_element(el, parent, locator, "foreign-element",
                              f"unrecognized element {name} in {parent}", entry_index)

    # -- entries ---------------------------------------------------------

    def parse_entry(self, url_el, url_locator, entry_index, capability) -> Optional[Entry]:
        mark_nodes = len(self.nodes)
        for name, value in url_el.attrib.items():
            self.keep_attribute(name, value, "url", f"{url_locator}/@{display_name(name)}",
                                "foreign-attribute", f"attribute {display_name(name)} on url",
                                entry_index)
        loc = None
        lastmod = None
        md = None
        links = []
        counts: dict[str, int] = {}
        for el in url_el:
            if not isinstance(el.tag, str):
                continue
            name = display_name(el.tag)
            counts[name] = counts.get(name, 0) + 1
            locator = f"{url_locator}/{name}" + (f"[{counts[name]}]" if counts[name] > 1 else "")
            ns, local = _split(el.tag)
            if ns == SITEMAP_NS and local == "loc":
                if loc is not None:
                    self.keep_element(el, "url", locator, "duplicate-loc",
                                      "more than one loc in url", entry_index)
                    continue
                for aname, value in el.attrib.items():
                    self.keep_attribute(aname, value, "loc", f"{locator}/@{display_name(aname)}",
                                        "attribute-on-loc",
                                        f"attribute {display_name(aname)} on mandatory element loc",
                                        entry_index)
                loc = (el.text or "").strip()
            elif ns == SITEMAP_NS and local == "lastmod":
                if counts[name] > 1:
                    self.keep_element(el, "url", locator, "foreign-element",
                                      "more than one lastmod in url", entry_index)
                    continue
                for aname, value in el.attrib.items():
                    self.keep_attribute(aname, value, "lastmod",
                                        f"{locator}/@{display_name(aname)}",
                                        "attribute-on-lastmod",
                                        f"attribute {display_name(aname)} on lastmod",
                                        entry_index)
                text = (el.text or "").strip()
                try:
                    lastmod = parse_datetime(text)
                except ValueError:
                    self.keep_element(el, "url", locator, "invalid-lastmod",
                                      f"lastmod is not a W3C datetime: {text!r}", entry_index)
            elif ns == RS_NS and local == "md":
                if md is not None:
                    self.keep_element(el, "url", locator, "duplicate-entry-md",
                                      "more than one rs:md in url", entry_index)
                    continue
                md = self.parse_entry_md(el, locator, entry_index, capability)
            elif ns == RS_NS and local == "ln":
                ln = self.parse_ln(el, "url", locator, entry_index)
                if ln is not None:
                    links.append(ln)
            else:
                self.keep_foreign(el, "url", locator, entry_index)

        problem = None
        if loc is None:
            problem = ("missing-loc", "url has no loc")
        elif not is_absolute_uri(loc):
            problem = ("invalid-loc", f"loc is not an absolute URI: {loc!r}")
        elif capability is Capability.CAPABILITYLIST and (md is None or md.capability is None):
            problem = ("missing-capability", "capability list entry does not name a capability")
        if problem is not None:
            del self.nodes[mark_nodes:]
            self.warn(problem[0], url_locator, problem[1] + "; entry dropped")
            return None
        return Entry(loc=loc, lastmod=lastmod, md=md, links=tuple(links))

    def parse_entry_md(self, el, locator, entry_index, capability) -> Md:
        values = {}
        for name, raw in el.attrib.items():
            alocator = f"{locator}/@{display_name(name)}"
            value = raw.strip()

            def keep(code, message):
                self.keep_attribute(name, raw, "rs:md", alocator, code, message, entry_index)

            if name == "change":
                try:
                    values["change"] = ChangeType(value)
                except ValueError:
                    keep("unknown-change-token", f"unrecognized change token {value!r}")
            elif name == "length":
                if value.isdigit():
                    values["length"] = int(value)
                else:
                    keep("invalid-attribute", f"length is not a non-negative integer: {raw!r}")
            elif name == "type":
                if value and not any(c.isspace() for c in value):
                    values["type"] = value
                else:
                    keep("invalid-attribute", f"bad MIME type {raw!r}")
            elif name == "hash":
                try:
                    values["hash"] = parse_hash(value)
                except MalformedHash as exc:
                    keep("invalid-attribute", str(exc))
            elif name == "capability" and capability is Capability.CAPABILITYLIST:
                try:
                    values["capability"] = Capability(value)
                except ValueError:
                    keep("unknown-capability", f"unrecognized capability {value!r}")
            elif name in ("capability", "modified"):
                keep("md-scope", f"attribute {name} not allowed on entry rs:md")
            else:
                keep("foreign-attribute", f"attribute {display_name(name)} on rs:md")
        return Md(**values)


def parse(data: bytes, mode: ParseMode = ParseMode.STRICT) -> tuple[Document, list[ParseWarning]]:
    """Parse Sitemap XML into a Document and the list of tolerated deviations.

    Strict mode raises ``SchemaViolation`` listing every deviation (or
    ``UnknownCapability`` for an unrecognized root capability). A document
    without a root ``rs:md`` is rejected in strict mode unless it carries
    root-level ``rs:ln`` elements, which mark it as a ResourceSync document;
    its capability is then inferred as resourcelist.
    """
    mode = ParseMode(mode)
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        root = fromstring(data, forbid_dtd=True)
    except ET.ParseError as exc:
        raise XmlSyntax(str(exc)) from exc
    except DefusedXmlException as exc:
        raise XmlSyntax(f"forbidden XML construct: {exc}") from exc

    parser = _Parser()
    doc, warnings = parser.parse_root(root)
    if mode is ParseMode.STRICT:
        for w in warnings:
            if w.code == "unknown-capability" and w.locator.startswith("/urlset/rs:md"):
                token = next(n for n in doc.extensions if n.locator == w.locator)
                raise UnknownCapability(dict(token.attributes).get("capability", ""))
        violations = [w for i, w in enumerate(warnings) if i not in parser.lenient]
        if violations:
            raise SchemaViolation(violations)
    return doc, warnings


# -- serialization ---------------------------------------------------------


def _attr(value: str) -> str:
    return escape(value, {'"': "&quot;"})


def _ln_xml(ln: Ln) -> str:
    parts = [f'rel="{_attr(ln.rel)}"', f'href="{_attr(ln.href)}"']
    if ln.type is not None:
        parts.append(f'type="{_attr(ln.type)}"')
    return "<rs:ln " + " ".join(parts) + "/>"


def md_attributes(md: Md) -> str:
    """The attribute string of an rs:md element in canonical order."""
    parts = []
    if md.capability is not None:
        parts.append(f'capability="{md.capability.value}"')
    if md.modified is not None:
        parts.append(f'modified="{format_datetime(md.modified)}"')
    if md.change is not None:
        parts.append(f'change="{md.change.value}"')
    if md.length is not None:
        parts.append(f'length="{md.length}"')
    if md.type is not None:
        parts.append(f'type="{_attr(md.type)}"')
    if md.hash is not None:
        parts.append(f'hash="{_attr(str(md.hash))}"')
    return " ".join(parts)


def _md_xml(md: Md) -> str:
    attrs = md_attributes(md)
    return f"<rs:md {attrs}/>" if attrs else "<rs:md/>"


def _check(doc: Document) -> None:
    if not isinstance(doc, Document):
        raise InvariantViolation(f"not a Document: {doc!r}")
    try:
        doc.md.check_root_scope()
        for entry in doc.entries:
            if not isinstance(entry, Entry):
                raise InvariantViolation(f"not an Entry: {entry!r}")
            for ln in entry.links:
                if not isinstance(ln, Ln):
                    raise InvariantViolation(f"not an Ln: {ln!r}")
    except (ValueError, TypeError) as exc:
        raise InvariantViolation(str(exc)) from exc


def serialize(doc: Document) -> bytes:
    _check(doc)
    lines = [
        XML_DECLARATION,
        f'<urlset xmlns="{SITEMAP_NS}" xmlns:rs="{RS_NS}">',
    ]
    for ln in doc.root_links:
        lines.append("  " + _ln_xml(ln))
    lines.append("  " + _md_xml(doc.md))
    for entry in doc.entries:
        lines.append("  <url>")
        lines.append(f"    <loc>{escape(entry.loc)}</loc>")
        if entry.lastmod is not None:
            lines.append(f"    <lastmod>{format_datetime(entry.lastmod)}</lastmod>")
        if entry.md is not None:
            lines.append("    " + _md_xml(entry.md))
        for ln in entry.links:
            lines.append("    " + _ln_xml(ln))
        lines.append("  </url>")
    lines.append("</urlset>")
    out = ("\n".join(lines) + "\n").encode("utf-8")
    if len(out) > MAX_SERIALIZED_BYTES:
        raise CapacityExceeded(f"serialized size {len(out)} exceeds {MAX_SERIALIZED_BYTES} bytes")
    return out
