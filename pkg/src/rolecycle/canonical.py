"""Canonical JSON encoding and SHA-256 digests.

Canonical form: UTF-8, object keys sorted, no insignificant whitespace,
sets emitted as sorted arrays, a single trailing line feed. Equal values
always encode to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any

from .errors import NonCanonicalizable

GENESIS_HASH = "0" * 64


def to_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise NonCanonicalizable(f"object key {k!r} is not a string")
            out[k] = to_jsonable(v)
        return out
    if isinstance(value, (set, frozenset)):
        items = [to_jsonable(v) for v in value]
        try:
            return sorted(items)
        except TypeError:
            return sorted(items, key=lambda v: json.dumps(v, sort_keys=True))
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise NonCanonicalizable(f"non-finite number {value!r}")
        return value
    raise NonCanonicalizable(f"cannot canonicalize {type(value).__name__}")


def canonicalize(body: Any) -> bytes:
    """Encode *body* as canonical JSON bytes (line-feed terminated)."""
    text = json.dumps(
        to_jsonable(body),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8") + b"\n"


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(body: Any) -> str:
    """SHA-256 hex of the canonical encoding of *body*."""
    return sha256_hex(canonicalize(body))


def parse_canonical(raw: bytes) -> Any:
    """Parse *raw* and insist it is already in canonical form.

    Raises ValueError for anything that is not byte-for-byte canonical, so a
    single flipped byte anywhere in a stored document is caught here or by
    the digest comparison that follows.
    """
    text = raw.decode("utf-8")
    value = json.loads(text)
    if canonicalize(value) != raw:
        raise ValueError("document is not in canonical form")
    return value
