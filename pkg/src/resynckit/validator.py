"""Check a tolerant-parsed document against three schema regimes.

``original_schema`` is the Sitemap schema before it admitted root-level
extension children; ``updated_schema`` is the revised one; and
``search_engine_tolerant`` models a consumer that never rejects and only
warns about what it does not recognize.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

from .codec import RS_NS, SITEMAP_NS, SITEMAP_OPTIONAL
from .errors import UnknownCapability
from .model import Capability, Document

# published finding codes
ROOT_FOREIGN_CHILD = "root-foreign-child"
ATTRIBUTE_ON_LASTMOD = "attribute-on-lastmod"
UNRECOGNIZED_CHILD = "unrecognized-child"
ATTRIBUTE_ON_LOC = "attribute-on-loc"
LEGACY_LINK_ELEMENT = "legacy-link-element"
UNKNOWN_CHANGE_TOKEN = "unknown-change-token"
MISSING_ROOT_MD = "missing-root-md"
DUPLICATE_ROOT_MD = "duplicate-root-md"
INDEXABLE_LINK_URIS = "indexable-link-uris"


class SchemaRegime(str, enum.Enum):
    ORIGINAL = "original_schema"
    UPDATED = "updated_schema"
    TOLERANT = "search_engine_tolerant"


REGIME_ALIASES = {
    "original": SchemaRegime.ORIGINAL,
    "updated": SchemaRegime.UPDATED,
    "tolerant": SchemaRegime.TOLERANT,
}


class Severity(str, enum.Enum):
    ERROR = "error"
    WARNING = "warning"
    INFO = "info"


@dataclass(frozen=True)
class Finding:
    severity: Severity
    code: str
    message: str
    locator: str

    def __str__(self) -> str:
        return f"{self.severity.value.upper()} {self.code} {self.locator} {self.message}"

    def to_record(self) -> dict:
        record = asdict(self)
        record["severity"] = self.severity.value
        return record


def detect_capability(doc: Document) -> Capability:
    """Return the document's capability.

    An unrecognized token kept from tolerant parsing raises
    ``UnknownCapability``. A missing root rs:md yields resourcelist, with
    ``doc.capability_inferred`` set.
    """
    for node in doc.extensions:
        if node.entry_index is None and node.name == "rs:md" and node.code == "unknown-capability":
            raise UnknownCapability(dict(node.attributes).get("capability", ""))
    return doc.capability


def _root_child(regime: SchemaRegime, name: str, locator: str, in_sitemap_ns: bool,
                out: list[Finding]) -> None:
    if regime is SchemaRegime.TOLERANT:
        out.append(Finding(Severity.WARNING, UNRECOGNIZED_CHILD,
                           f"child element {name} of urlset is not recognized", locator))
    elif in_sitemap_ns:
        # neither schema admits undeclared sitemap-namespace elements at root
        out.append(Finding(Severity.ERROR, UNRECOGNIZED_CHILD,
                           f"{name} is not a sitemap element", locator))
    elif regime is SchemaRegime.ORIGINAL:
        out.append(Finding(Severity.ERROR, ROOT_FOREIGN_CHILD,
                           f"urlset may only contain url children, found {name}", locator))


def validate(doc: Document, regime: SchemaRegime | str) -> list[Finding]:
    regime = REGIME_ALIASES.get(regime, None) or SchemaRegime(regime)
    tolerant = regime is SchemaRegime.TOLERANT
    findings: list[Finding] = []

    # root level: rs:ln, rs:md, then kept root elements
    for i, _ in enumerate(doc.root_links, 1):
        _root_child(regime, "rs:ln", f"/urlset/rs:ln[{i}]", False, findings)
    root_nodes = [n for n in doc.extensions if n.entry_index is None]
    if not doc.capability_inferred:
        _root_child(regime, "rs:md", "/urlset/rs:md[1]", False, findings)
    elif regime is SchemaRegime.UPDATED and not any(
            n.kind == "element" and n.name == "rs:md" for n in root_nodes):
        findings.append(Finding(Severity.INFO, MISSING_ROOT_MD,
                                "no root rs:md; document reads as a plain Sitemap", "/urlset"))
    for node in root_nodes:
        if node.kind != "element" or node.parent != "urlset":
            continue
        _root_child(regime, node.name, node.locator, node.namespace == SITEMAP_NS, findings)
        if node.code == DUPLICATE_ROOT_MD:
            sev = Severity.WARNING if tolerant else Severity.ERROR
            findings.append(Finding(sev, DUPLICATE_ROOT_MD, "more than one root rs:md",
                                    node.locator))

    # entry level
    link_hrefs: list[str] = []
    by_entry: dict[int, list] = {}
    for node in doc.extensions:
        if node.entry_index is not None:
            by_entry.setdefault(node.entry_index, []).append(node)
    for index, entry in enumerate(doc.entries):
        link_hrefs.extend(ln.href for ln in entry.links)
        for node in by_entry.get(index, ()):
            if node.kind == "attribute" and node.parent == "lastmod":
                sev = Severity.WARNING if tolerant else Severity.ERROR
                findings.append(Finding(sev, ATTRIBUTE_ON_LASTMOD,
                                        f"attribute {node.name} on lastmod", node.locator))
            elif node.kind == "attribute" and node.parent == "loc":
                sev = Severity.WARNING if tolerant else Severity.ERROR
                findings.append(Finding(sev, ATTRIBUTE_ON_LOC,
                                        f"attribute {node.name} on loc", node.locator))
            elif node.code == UNKNOWN_CHANGE_TOKEN:
                findings.append(Finding(Severity.WARNING, UNKNOWN_CHANGE_TOKEN,
                                        f"unrecognized change token {node.value!r}",
                                        node.locator))
            elif node.kind == "element" and node.code == LEGACY_LINK_ELEMENT:
                href = dict(node.attributes).get("href")
                if href:
                    link_hrefs.append(href)
                if tolerant and node.namespace == RS_NS:
                    findings.append(Finding(Severity.WARNING, LEGACY_LINK_ELEMENT,
                                            "link elements are expected in the XHTML namespace",
                                            node.locator))
            elif (node.kind == "element" and node.namespace == SITEMAP_NS
                  and node.name not in SITEMAP_OPTIONAL):
                sev = Severity.WARNING if tolerant else Severity.ERROR
                findings.append(Finding(sev, UNRECOGNIZED_CHILD,
                                        f"{node.name} not allowed here ({node.code})",
                                        node.locator))
            # other declared foreign children are admitted by both schemas

    if tolerant and link_hrefs:
        findings.append(Finding(Severity.INFO, INDEXABLE_LINK_URIS,
                                "link targets a crawler may index: " + " ".join(link_hrefs),
                                "/urlset"))
    return findings


def has_errors(findings: list[Finding]) -> bool:
    return any(f.severity is Severity.ERROR for f in findings)


def render_text(findings: list[Finding]) -> str:
    return "".join(f"{f}\n" for f in findings)


def render_json(findings: list[Finding]) -> str:
    return json.dumps([f.to_record() for f in findings], indent=2)
