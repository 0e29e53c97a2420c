import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from detrace.canon import (
    INT_MAX,
    INT_MIN,
    CanonError,
    ParseError,
    canon_decode,
    canon_encode,
    hash64,
)
from detrace.model import State, state_hash

from oracles import canon_bytes

canon_values = hs.recursive(
    hs.none()
    | hs.booleans()
    | hs.integers(INT_MIN, INT_MAX)
    | hs.text(),
    lambda inner: hs.lists(inner, max_size=5) | hs.dictionaries(hs.text(max_size=8), inner, max_size=5),
    max_leaves=20,
)


class TestGolden:
    def test_nested_map_sorted_keys_raw_utf8(self):
        v = {"b": [1, {"z": None, "a": True}], "a": "é"}
        assert canon_encode(v) == b'{"a":"\xc3\xa9","b":[1,{"a":true,"z":null}]}'

    def test_scalars(self):
        assert canon_encode(None) == b"null"
        assert canon_encode(False) == b"false"
        assert canon_encode(-42) == b"-42"
        assert canon_encode("a\"b\n") == b'"a\\"b\\n"'

    def test_int_bounds(self):
        assert canon_encode([INT_MIN, INT_MAX]) == b"[-9223372036854775808,9223372036854775807]"

    def test_key_order_is_code_point_order(self):
        assert canon_encode({"b": 1, "B": 2, "a": 3, "é": 4}) == '{"B":2,"a":3,"b":1,"é":4}'.encode()

    def test_state_hash_frozen(self):
        s = State({"x": 1, "y": [1, 2], "z": None})
        assert s.canon == b'{"x":1,"y":[1,2],"z":null}'
        assert state_hash(s) == 5868489927384156138

    def test_state_hash_is_masked_blake2b(self):
        s = State({"term_1": 3})
        d = hashlib.blake2b(s.canon, digest_size=8, person=b"detrace.state").digest()
        assert state_hash(s) == int.from_bytes(d, "big") & (2**63 - 1)


class TestRejects:
    @pytest.mark.parametrize("v", [1.5, float("nan"), {"a": 0.0}, [2**63], [-(2**63) - 1], {1: 2}])
    def test_out_of_domain(self, v):
        with pytest.raises(CanonError):
            canon_encode(v)

    @pytest.mark.parametrize(
        "text",
        [b"1.0", b"[1e3]", b"NaN", b'{"a":1,"a":2}', b"9223372036854775808", b"\xff", b"[1,"],
    )
    def test_bad_bytes(self, text):
        with pytest.raises(ParseError):
            canon_decode(text)


@settings(max_examples=1500, deadline=None)
@given(canon_values)
def test_round_trip(v):
    b = canon_encode(v)
    assert canon_decode(b) == v
    assert canon_encode(canon_decode(b)) == b
    assert b == canon_bytes(v)


def test_hash64_person_separates_domains():
    assert hash64(b"x", person=b"a") != hash64(b"x", person=b"b")
