"""Content hashing in the ``algorithm:digest`` form used by rs:md."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import MalformedHash
from .model import HASHLIB_NAMES, Hash

DEFAULT_ALGORITHM = "md5"
_CHUNK = 1 << 16


def hasher(algorithm: str):
    try:
        return hashlib.new(HASHLIB_NAMES[algorithm.lower()])
    except KeyError:
        raise MalformedHash(f"unsupported hash algorithm: {algorithm!r}") from None


def hash_bytes(data: bytes, algorithm: str = DEFAULT_ALGORITHM) -> Hash:
    h = hasher(algorithm)
    h.update(data)
    return Hash(algorithm, h.hexdigest())


def hash_file(path: str | Path, algorithm: str = DEFAULT_ALGORITHM) -> tuple[int, Hash]:
    """Return ``(length, hash)`` of a file, reading it in chunks."""
    h = hasher(algorithm)
    length = 0
    with open(path, "rb") as fh:
        while chunk := fh.read(_CHUNK):
            h.update(chunk)
            length += len(chunk)
    return length, Hash(algorithm, h.hexdigest())
