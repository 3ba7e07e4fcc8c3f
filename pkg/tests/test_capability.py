from dataclasses import replace

import pytest

from capguard import crypto
from capguard.capability import (
    BODY_FIELDS,
    CapabilityPackage,
    compute_cap_id,
    issue_capability,
    parse_capability,
    sign_capability,
    verify_capability,
)
from capguard.errors import (
    AssetMismatch,
    BadSignature,
    CapIdMismatch,
    Expired,
    NotYetValid,
    OperationMismatch,
    OperationNotCovered,
    ParseError,
    PolicyMismatch,
    PolicyNotActive,
    UntrustedIssuer,
)
from capguard.evidence import Subject
from capguard.policy import policy_from_dict

from .conftest import T0, paid_download_doc

EXPECTED = {"asset_id": "ds1", "operation": "download", "policy_id": "p1"}


@pytest.fixture()
def policy(keys):
    return policy_from_dict(paid_download_doc(keys, ttl_seconds=600)).with_status("registered")


@pytest.fixture()
def cap(policy, keys, clock):
    return issue_capability(policy, Subject("user", keys.id("user")), "download", {}, keys["engine"], clock)


@pytest.fixture()
def trusted(keys):
    return {keys.id("engine"): keys["engine"].public_key}


class TestIssue:
    def test_fields(self, cap, policy, keys):
        assert cap.issued_at == T0 and cap.expires_at == T0 + 600
        assert cap.subject_kind == "user" and cap.subject_key_id == keys.id("user")
        assert cap.policy_version == 1 and cap.engine_key_id == keys.id("engine")
        assert len(cap.nonce) == 32 and cap.cap_id == compute_cap_id(cap)

    def test_nonce_makes_each_package_unique(self, policy, keys, clock):
        subject = Subject("user", keys.id("user"))
        a = issue_capability(policy, subject, "download", {}, keys["engine"], clock)
        b = issue_capability(policy, subject, "download", {}, keys["engine"], clock)
        assert a.cap_id != b.cap_id

    def test_requires_registered_policy(self, policy, keys, clock):
        with pytest.raises(PolicyNotActive):
            issue_capability(policy.with_status("revoked"), Subject("user", keys.id("user")), "download", {}, keys["engine"], clock)

    def test_operation_must_be_covered(self, policy, keys, clock):
        with pytest.raises(OperationNotCovered):
            issue_capability(policy, Subject("user", keys.id("user")), "execute:fedavg", {}, keys["engine"], clock)

    def test_wire_round_trip(self, cap):
        again = parse_capability(cap.encode())
        assert again == cap and again.encode() == cap.encode()
        assert parse_capability(crypto.canonical_encode({"capability": cap.to_dict()})) == cap

    @pytest.mark.parametrize("mutate", [lambda d: d.pop("nonce"), lambda d: d.update(extra=1), lambda d: d.update(issued_at="1"), lambda d: d.update(single_use=1), lambda d: d.update(signature="ab")])
    def test_parse_rejects_bad_shapes(self, cap, mutate):
        data = cap.to_dict()
        mutate(data)
        with pytest.raises(ParseError):
            CapabilityPackage.from_dict(data)


class TestVerify:
    def test_valid(self, cap, trusted, clock):
        verify_capability(cap, trusted, EXPECTED, clock)

    def test_untrusted_engine(self, cap, keys, clock):
        with pytest.raises(UntrustedIssuer):
            verify_capability(cap, {keys.id("other"): keys["other"].public_key}, EXPECTED, clock)

    def test_resigned_by_other_engine_is_untrusted(self, cap, keys, trusted, clock):
        forged = sign_capability(cap, keys["rogue"])
        with pytest.raises(UntrustedIssuer):
            verify_capability(forged, trusted, EXPECTED, clock)

    def test_impersonated_engine_key_id(self, cap, keys, trusted, clock):
        forged = replace(sign_capability(cap, keys["rogue"]), engine_key_id=keys.id("engine"))
        with pytest.raises(BadSignature):
            verify_capability(forged, trusted, EXPECTED, clock)

    def test_cap_id_must_match_body(self, cap, keys, trusted, clock):
        # a correctly signed package whose cap_id is not the body digest
        wrong = replace(cap, cap_id="0" * 64)
        wrong = replace(wrong, signature=crypto.sign(keys["engine"].private_key, crypto.canonical_encode(wrong.body())))
        with pytest.raises(CapIdMismatch):
            verify_capability(wrong, trusted, EXPECTED, clock)

    @pytest.mark.parametrize(
        "expected, error",
        [
            ({"asset_id": "other", "operation": "download"}, AssetMismatch),
            ({"asset_id": "ds1", "operation": "execute:fedavg"}, OperationMismatch),
            ({"asset_id": "ds1", "operation": "download", "policy_id": "p2"}, PolicyMismatch),
        ],
    )
    def test_binding(self, cap, trusted, clock, expected, error):
        with pytest.raises(error):
            verify_capability(cap, trusted, expected, clock)

    def test_expiry_is_inclusive(self, cap, trusted, clock):
        clock.set(cap.expires_at)
        verify_capability(cap, trusted, EXPECTED, clock)
        clock.set(cap.expires_at + 1)
        with pytest.raises(Expired):
            verify_capability(cap, trusted, EXPECTED, clock)

    def test_not_yet_valid_beyond_skew(self, cap, trusted, clock):
        clock.set(cap.issued_at - 300)
        verify_capability(cap, trusted, EXPECTED, clock)
        clock.set(cap.issued_at - 301)
        with pytest.raises(NotYetValid):
            verify_capability(cap, trusted, EXPECTED, clock)

    def test_check_order_signature_before_binding(self, cap, trusted, clock):
        # tampered and mismatched: the signature failure is reported first
        tampered = replace(cap, asset_id="other")
        with pytest.raises(BadSignature):
            verify_capability(tampered, trusted, {"asset_id": "nope", "operation": "x"}, clock)

    @pytest.mark.parametrize("name", [f for f in BODY_FIELDS if f not in ("engine_key_id",)])
    def test_every_body_field_is_covered(self, cap, trusted, clock, name):
        value = getattr(cap, name)
        if isinstance(value, bool):
            new = not value
        elif isinstance(value, int):
            new = value + 1
        elif isinstance(value, dict):
            new = {"extra": "x"}
        else:
            new = value[:-1] + ("0" if value[-1:] != "0" else "1")
        with pytest.raises((BadSignature, CapIdMismatch)):
            verify_capability(replace(cap, **{name: new}), trusted, EXPECTED, clock)
