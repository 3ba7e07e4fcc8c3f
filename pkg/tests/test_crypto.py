import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capguard import crypto
from capguard.crypto import (
    INT_MAX,
    INT_MIN,
    SealedPayload,
    canonical_decode,
    canonical_encode,
    digest,
    is_canonical,
)
from capguard.errors import AuthenticationFailure, BadSeedLength, NonCanonicalizable, ParseError

wire_values = st.recursive(
    st.booleans()
    | st.integers(INT_MIN, INT_MAX)
    | st.text(),
    lambda children: st.lists(children, max_size=5) | st.dictionaries(st.text(max_size=8), children, max_size=5),
    max_leaves=20,
)


class TestCanonicalEncoding:
    def test_sorted_keys_no_whitespace(self):
        assert canonical_encode({"b": 1, "a": [True, False, "x"]}) == b'{"a":[true,false,"x"],"b":1}'

    def test_non_ascii_emitted_as_utf8(self):
        assert canonical_encode({"k": "é☃"}) == '{"k":"é☃"}'.encode("utf-8")

    def test_key_order_is_code_point_order(self):
        data = {"é": 1, "z": 2, "A": 3, "\U0001f600": 4}
        out = canonical_encode(data).decode()
        assert out.index('"A"') < out.index('"z"') < out.index('"é"') < out.index('"\U0001f600"')

    @pytest.mark.parametrize("value", [1.5, float("nan"), None, {1: "a"}, {"a": {"b": 0.0}}, 2**63, -(2**63) - 1, b"x"])
    def test_rejects_values_outside_wire_subset(self, value):
        with pytest.raises(NonCanonicalizable):
            canonical_encode(value)

    def test_int64_bounds_accepted(self):
        assert canonical_decode(canonical_encode([INT_MIN, INT_MAX])) == [INT_MIN, INT_MAX]

    @pytest.mark.parametrize(
        "text",
        ['{"a":1.0}', '{"a":NaN}', '{"a":1,"a":2}', '{"a":null}', "[1e3]", b"\xff\xfe"],
    )
    def test_decode_rejects(self, text):
        with pytest.raises(ParseError):
            canonical_decode(text)

    def test_decode_accepts_loose_whitespace_but_is_not_canonical(self):
        assert canonical_decode('{ "b" : 1, "a" : 2 }') == {"a": 2, "b": 1}
        assert not is_canonical(b'{ "b" : 1, "a" : 2 }')
        assert is_canonical(b'{"a":2,"b":1}')

    @settings(max_examples=300)
    @given(wire_values)
    def test_round_trip_is_byte_identical(self, value):
        data = canonical_encode(value)
        assert canonical_encode(canonical_decode(data)) == data
        assert is_canonical(data)

    @given(st.dictionaries(st.text(max_size=6), st.integers(0, 9), max_size=8))
    def test_insertion_order_irrelevant(self, d):
        reordered = dict(reversed(list(d.items())))
        assert canonical_encode(d) == canonical_encode(reordered)

    @given(wire_values)
    def test_matches_stdlib_sorted_dump(self, value):
        # independent route: Python's json with the same options
        expected = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
        assert canonical_encode(value) == expected


class TestDigest:
    def test_known_vector(self):
        assert digest(b"abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"

    def test_digest_value_uses_canonical_bytes(self):
        assert crypto.digest_value({"b": 1, "a": 2}) == hashlib.sha256(b'{"a":2,"b":1}').hexdigest()


class TestKeysAndSignatures:
    def test_seeded_keygen_is_deterministic(self):
        a = crypto.generate_keypair(bytes(32))
        b = crypto.generate_keypair(bytes(32))
        assert a == b
        assert a.key_id == a.public_key.hex() and len(a.key_id) == 64

    def test_rfc8032_test_vector_1(self):
        seed = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
        kp = crypto.generate_keypair(seed)
        assert kp.key_id == "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
        sig = crypto.sign(kp.private_key, b"")
        assert sig.hex().startswith("e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155")

    @pytest.mark.parametrize("n", [0, 16, 31, 33, 64])
    def test_bad_seed_length(self, n):
        with pytest.raises(BadSeedLength):
            crypto.generate_keypair(bytes(n))

    def test_verify(self):
        kp = crypto.generate_keypair()
        sig = crypto.sign(kp.private_key, b"msg")
        assert crypto.verify(kp.public_key, b"msg", sig)
        assert not crypto.verify(kp.public_key, b"msh", sig)
        assert not crypto.verify(crypto.generate_keypair().public_key, b"msg", sig)
        assert not crypto.verify(kp.public_key, b"msg", sig[:-1])
        assert not crypto.verify(b"short", b"msg", sig)

    def test_key_document_round_trip(self):
        kp = crypto.generate_keypair()
        assert crypto.KeyPair.from_dict(kp.to_dict()) == kp
        pub = crypto.KeyPair.from_dict(kp.to_dict(include_private=False))
        assert not pub.has_private and pub.key_id == kp.key_id

    def test_key_document_rejects_mismatched_halves(self):
        a, b = crypto.generate_keypair(), crypto.generate_keypair()
        doc = dict(a.to_dict(), private_key=b.private_key.hex())
        with pytest.raises(ParseError):
            crypto.KeyPair.from_dict(doc)

    def test_public_key_from_id(self):
        kp = crypto.generate_keypair()
        assert crypto.public_key_from_id(kp.key_id) == kp.public_key
        with pytest.raises(ValueError):
            crypto.public_key_from_id("ab")


class TestSealing:
    def test_round_trip(self):
        kp = crypto.generate_keypair()
        sealed = crypto.seal(kp.public_key, b"payload")
        assert crypto.open_sealed(kp.private_key, sealed) == b"payload"

    def test_fresh_ephemeral_each_time(self):
        kp = crypto.generate_keypair()
        a, b = crypto.seal(kp.public_key, b"x"), crypto.seal(kp.public_key, b"x")
        assert a.ephemeral_public != b.ephemeral_public and a.ciphertext != b.ciphertext

    def test_wrong_key_fails(self):
        kp, other = crypto.generate_keypair(), crypto.generate_keypair()
        sealed = crypto.seal(kp.public_key, b"payload")
        with pytest.raises(AuthenticationFailure):
            crypto.open_sealed(other.private_key, sealed)

    @pytest.mark.parametrize("field", ["ephemeral_public", "nonce", "ciphertext"])
    def test_any_bit_flip_fails(self, field):
        kp = crypto.generate_keypair()
        sealed = crypto.seal(kp.public_key, b"payload bytes")
        raw = bytearray(getattr(sealed, field))
        raw[len(raw) // 2] ^= 0x01
        tampered = SealedPayload(**{**sealed.__dict__, field: bytes(raw)})
        with pytest.raises(AuthenticationFailure):
            crypto.open_sealed(kp.private_key, tampered)

    def test_wire_round_trip(self):
        kp = crypto.generate_keypair()
        sealed = crypto.seal(kp.public_key, b"")
        again = SealedPayload.from_dict(canonical_decode(canonical_encode(sealed.to_dict())))
        assert crypto.open_sealed(kp.private_key, again) == b""

    @settings(max_examples=25, deadline=None)
    @given(st.binary(max_size=2048))
    def test_round_trip_property(self, data):
        kp = crypto.generate_keypair()
        assert crypto.open_sealed(kp.private_key, crypto.seal(kp.public_key, data)) == data
