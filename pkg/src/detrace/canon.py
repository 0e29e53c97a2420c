"""Canonical value domain and its deterministic text encoding.

A canonical value is one of ``None``, ``bool``, ``int`` (signed 64-bit),
``str``, ``list`` of canonical values, or ``dict`` mapping ``str`` to
canonical values.  Floats are rejected everywhere so that equality of
encoded bytes is exact equality of values.

The encoding is compact JSON with keys sorted by code point (which is the
same order as sorting their UTF-8 bytes) and non-ASCII text emitted as raw
UTF-8.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Union

CanonValue = Union[None, bool, int, str, list, dict]

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

# All 64-bit identifiers in files are masked into the non-negative half of
# the signed canonical integer range so they round-trip through canon_decode.
ID_MASK = 2**63 - 1


class CanonError(ValueError):
    """A value is outside the canonical domain."""


class ParseError(ValueError):
    """Bytes do not decode to a canonical value."""


def check_value(v: Any) -> None:
    """Raise :class:`CanonError` unless *v* is a well-formed canonical value."""
    stack = [v]
    while stack:
        x = stack.pop()
        t = type(x)
        if x is None or t is bool or t is str:
            continue
        if t is int:
            if not INT_MIN <= x <= INT_MAX:
                raise CanonError(f"integer {x} outside signed 64-bit range")
        elif t is list or t is tuple:
            stack.extend(x)
        elif t is dict:
            for k in x:
                if type(k) is not str:
                    raise CanonError(f"map key {k!r} is not a string")
            stack.extend(x.values())
        elif isinstance(x, dict):
            stack.append(dict(x))
        elif isinstance(x, float):
            raise CanonError("floats are not canonical values")
        elif isinstance(x, bool):
            continue
        elif isinstance(x, int):
            stack.append(int(x))
        elif isinstance(x, str):
            continue
        else:
            raise CanonError(f"unsupported type {t.__name__}")


_dumps = json.JSONEncoder(
    sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
).encode


def canon_encode(v: CanonValue) -> bytes:
    check_value(v)
    return _dumps(v).encode("utf-8")


def encode_unchecked(v: CanonValue) -> bytes:
    """canon_encode without the domain check, for values already known valid."""
    return _dumps(v).encode("utf-8")


def canon_text(v: CanonValue) -> str:
    return canon_encode(v).decode("utf-8")


def _reject_float(text: str):
    raise ParseError(f"float literal {text!r} is not canonical")


def _reject_constant(text: str):
    raise ParseError(f"constant {text!r} is not canonical")


def _parse_int(text: str) -> int:
    n = int(text)
    if not INT_MIN <= n <= INT_MAX:
        raise ParseError(f"integer {text} overflows signed 64-bit range")
    return n


def _no_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for k, v in pairs:
        if k in out:
            raise ParseError(f"duplicate map key {k!r}")
        out[k] = v
    return out


def canon_decode(b: bytes | str) -> CanonValue:
    """Decode bytes into a canonical value.

    Non-canonical spellings (whitespace, any key order) are accepted; the
    result re-encodes canonically.
    """
    if isinstance(b, (bytes, bytearray, memoryview)):
        try:
            text = bytes(b).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc}") from None
    else:
        text = b
    try:
        return json.loads(
            text,
            parse_float=_reject_float,
            parse_int=_parse_int,
            parse_constant=_reject_constant,
            object_pairs_hook=_no_duplicate_keys,
        )
    except ParseError:
        raise
    except (json.JSONDecodeError, RecursionError) as exc:
        raise ParseError(str(exc)) from None


def hash64(data: bytes, *, person: bytes) -> int:
    """Keyed 64-bit BLAKE2b of *data*, masked to 63 bits (see ``ID_MASK``)."""
    h = hashlib.blake2b(data, digest_size=8, person=person)
    return int.from_bytes(h.digest(), "big") & ID_MASK
