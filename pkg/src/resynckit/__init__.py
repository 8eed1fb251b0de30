"""ResourceSync toolkit: Sitemap-based capability documents and a sync engine."""

from .codec import ParseMode, ParseWarning, parse, serialize
from .model import (
    Capability,
    ChangeType,
    Document,
    Entry,
    ForeignNode,
    Hash,
    Ln,
    Md,
    add_entry,
    new_document,
    parse_hash,
)
from .validator import Finding, SchemaRegime, detect_capability, validate

__all__ = [
    "Capability",
    "ChangeType",
    "Document",
    "Entry",
    "Finding",
    "ForeignNode",
    "Hash",
    "Ln",
    "Md",
    "ParseMode",
    "ParseWarning",
    "SchemaRegime",
    "add_entry",
    "detect_capability",
    "new_document",
    "parse",
    "parse_hash",
    "serialize",
    "validate",
]
