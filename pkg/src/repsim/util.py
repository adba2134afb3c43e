"""Small shared helpers: name filters, stable float formatting, digests."""

from __future__ import annotations

import fnmatch
import hashlib


def matches_name(name: str, pattern: str | None) -> bool:
    """Glob match when the pattern has wildcards, substring match otherwise."""
    if pattern is None or pattern == "":
        return True
    if any(ch in pattern for ch in "*?["):
        return fnmatch.fnmatchcase(name, pattern)
    return pattern in name


def fmt_float(v: float) -> str:
    """Shortest round-trip decimal form, so CSV output is diff-stable."""
    return repr(float(v))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
