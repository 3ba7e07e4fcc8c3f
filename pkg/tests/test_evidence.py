import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capguard import crypto, signers, templates
from capguard.errors import (
    BadSignature,
    FutureTimestamp,
    NoSubject,
    SchemaError,
    StaleEvidence,
    SubjectMismatch,
    UnknownIssuer,
)
from capguard.evidence import (
    EvidenceBundle,
    EvidenceItem,
    TrustAnchors,
    denial_reasons,
    make_item,
    parse_bundle,
    resolve_subject,
    satisfy_clause,
    verify_item,
)
from capguard.policy import parse_clause, policy_from_dict

from .conftest import T0, Keys, paid_download_doc, paid_evidence, seeded

CTX = {"asset_id": "ds1", "operation": "download"}


def anchors_for(keys, doc):
    return TrustAnchors.from_policy(policy_from_dict(doc))


def verified(items, anchors, now=T0):
    return [verify_item(it, anchors, now, index=i) for i, it in enumerate(items)]


class TestItemVerification:
    def test_anchored_item_verifies(self, keys):
        anchors = anchors_for(keys, paid_download_doc(keys))
        item = signers.designee_signature(keys["d1"], "ds1", "download", keys.id("user"), T0)
        v = verify_item(item, anchors, T0)
        assert v.subject_key_id == keys.id("user")

    def test_unknown_issuer(self, keys):
        anchors = anchors_for(keys, paid_download_doc(keys))
        item = signers.designee_signature(keys["stranger"], "ds1", "download", keys.id("user"), T0)
        with pytest.raises(UnknownIssuer):
            verify_item(item, anchors, T0)

    def test_role_confusion_rejected(self, keys):
        # a designee key cannot issue payment receipts
        anchors = anchors_for(keys, paid_download_doc(keys))
        item = signers.payment_receipt(keys["d1"], keys.id("user"), 10**6, "USD", "ds1", "r", T0)
        with pytest.raises(UnknownIssuer):
            verify_item(item, anchors, T0)

    def test_freshness_window(self, keys):
        anchors = anchors_for(keys, paid_download_doc(keys))
        sig = lambda t: signers.designee_signature(keys["d1"], "ds1", "download", keys.id("user"), t)  # noqa: E731
        verify_item(sig(T0 - 86400), anchors, T0)
        verify_item(sig(T0 + 300), anchors, T0)
        with pytest.raises(StaleEvidence):
            verify_item(sig(T0 - 86401), anchors, T0)
        with pytest.raises(FutureTimestamp):
            verify_item(sig(T0 + 301), anchors, T0)

    def test_compute_spec_must_be_self_signed(self, keys):
        anchors = TrustAnchors()
        spec = signers.compute_spec(keys["user"], "fedavg", {"local_epochs": "5"}, ["a", "b"], T0)
        assert verify_item(spec, anchors, T0).subject_key_id == keys.id("user")
        forged = make_item("compute_spec", keys["mallory"], dict(spec.payload))
        with pytest.raises(UnknownIssuer):
            verify_item(forged, anchors, T0)

    def test_schema(self, keys):
        with pytest.raises(SchemaError):
            make_item("designee_signature", keys["d1"], {"asset_id": "ds1"})
        with pytest.raises(SchemaError):
            make_item("gossip", keys["d1"], {})

    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_tamper_sensitivity(self, data):
        """Changing any byte of the signed payload or signature breaks verification."""
        d1, user = seeded("d1"), seeded("user")
        anchors = TrustAnchors(designees={d1.key_id: d1.public_key})
        item = signers.designee_signature(d1, "ds1", "download", user.key_id, T0)
        wire = bytearray(crypto.canonical_encode(item.to_dict()))
        pos = data.draw(st.integers(0, len(wire) - 1))
        wire[pos] ^= data.draw(st.integers(1, 255))
        try:
            tampered = EvidenceItem.from_dict(crypto.canonical_decode(bytes(wire)))
        except Exception:
            return  # no longer parses: rejected at the door
        if tampered == item:
            return
        with pytest.raises((BadSignature, UnknownIssuer, SchemaError, StaleEvidence, FutureTimestamp)):
            verify_item(tampered, anchors, T0)

    def test_wire_round_trip(self, keys):
        items = paid_evidence(keys, T0)
        bundle = EvidenceBundle(tuple(items), keys.id("user"))
        again = parse_bundle(crypto.canonical_encode(bundle.to_dict()))
        assert again == bundle and again.digest() == bundle.digest()

    def test_bundle_limits(self, keys):
        item = paid_evidence(keys, T0)[0].to_dict()
        with pytest.raises(SchemaError):
            EvidenceBundle.from_dict({"items": [item] * 65, "submitted_by_key_id": keys.id("user")})
        with pytest.raises(SchemaError):
            EvidenceBundle.from_dict({"items": [], "submitted_by_key_id": "nope"})


def _signature_oracle(designees, threshold, signed_by_subject):
    """True when some threshold-sized set of distinct designees all signed for one subject."""
    for signers_of_subject in signed_by_subject.values():
        for combo in itertools.combinations(designees, threshold):
            if all(d in signers_of_subject for d in combo):
                return True
    return False


class TestSignatureThreshold:
    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_matches_brute_force(self, n):
        designees = [seeded(f"d{i}") for i in range(n)]
        user = seeded("user")
        anchors = TrustAnchors(designees={d.key_id: d.public_key for d in designees})
        ids = tuple(d.key_id for d in designees)
        items = [signers.designee_signature(d, "ds1", "download", user.key_id, T0) for d in designees]
        ver = verified(items, anchors)
        for k in range(1, n + 1):
            clause = parse_clause(templates.signature_clause(ids, k))
            for mask in range(2**n):
                chosen = [v for i, v in enumerate(ver) if mask >> i & 1]
                got = satisfy_clause(clause, chosen + chosen, CTX).satisfied  # duplicates must not count
                want = _signature_oracle(ids, k, {user.key_id: {ids[i] for i in range(n) if mask >> i & 1}})
                assert got == want, (n, k, mask)

    def test_signatures_for_other_asset_or_operation_ignored(self, keys):
        doc = paid_download_doc(keys, threshold=2)
        anchors = anchors_for(keys, doc)
        clause = policy_from_dict(doc).requirement.children[0]
        items = [
            signers.designee_signature(keys["d1"], "ds1", "download", keys.id("user"), T0),
            signers.designee_signature(keys["d2"], "other", "download", keys.id("user"), T0),
            signers.designee_signature(keys["d3"], "ds1", "execute:fedavg", keys.id("user"), T0),
        ]
        result = satisfy_clause(clause, verified(items, anchors), CTX)
        assert not result.satisfied and result.reason == "distinct designees: 1 < 2"

    def test_signatures_split_across_subjects_do_not_combine(self, keys):
        doc = paid_download_doc(keys, threshold=2)
        clause = policy_from_dict(doc).requirement.children[0]
        items = [
            signers.designee_signature(keys["d1"], "ds1", "download", keys.id("alice"), T0),
            signers.designee_signature(keys["d2"], "ds1", "download", keys.id("bob"), T0),
        ]
        assert not satisfy_clause(clause, verified(items, anchors_for(keys, doc)), CTX).satisfied


class TestClauses:
    def test_payment_amount_and_currency(self, keys):
        doc = paid_download_doc(keys)
        clause = policy_from_dict(doc).requirement.children[1]
        anchors = anchors_for(keys, doc)
        receipt = lambda amount, cur="USD", asset="ds1": signers.payment_receipt(  # noqa: E731
            keys["pay"], keys.id("user"), amount, cur, asset, "r", T0
        )
        assert satisfy_clause(clause, verified([receipt(10000)], anchors), CTX).satisfied
        assert not satisfy_clause(clause, verified([receipt(9999)], anchors), CTX).satisfied
        assert not satisfy_clause(clause, verified([receipt(10**6, "EUR")], anchors), CTX).satisfied
        assert not satisfy_clause(clause, verified([receipt(10**6, asset="x")], anchors), CTX).satisfied

    @pytest.mark.parametrize(
        "claims, ok",
        [
            ({}, True),
            ({"ssh_disabled": False}, False),
            ({"ingress_ports": [443]}, False),
            ({"code_measurement": "ab" * 32}, False),
        ],
    )
    def test_attestation_claims(self, keys, claims, ok):
        good = crypto.digest(b"image")
        clause = parse_clause(templates.attestation_clause([keys.id("att")], [good]))
        anchors = TrustAnchors(attesters={keys.id("att"): keys["att"].public_key})
        args = dict(ssh_disabled=True, ingress_ports=[], code_measurement=good)
        args.update(claims)
        token = signers.attestation_token(keys["att"], keys.id("tee"), T0, **args)
        assert satisfy_clause(clause, verified([token], anchors), CTX).satisfied is ok

    def test_any_of(self, keys):
        doc = paid_download_doc(keys)
        req = {"type": "any_of", "children": doc["requirement"]["children"]}
        clause = parse_clause(req)
        anchors = anchors_for(keys, doc)
        receipt = paid_evidence(keys, T0)[-1:]
        assert satisfy_clause(clause, verified(receipt, anchors), CTX).satisfied
        assert not satisfy_clause(clause, [], CTX).satisfied

    def test_denial_reasons_list_every_failed_leaf(self, keys):
        doc = paid_download_doc(keys)
        result = satisfy_clause(policy_from_dict(doc).requirement, [], CTX)
        paths = [r["clause_path"] for r in denial_reasons(result)]
        assert paths == ["requirement.children[0]", "requirement.children[1]"]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 6), max_size=10), st.lists(st.integers(0, 6), max_size=6))
    def test_monotone_in_evidence(self, base, extra):
        """Adding valid evidence never turns a satisfied requirement unsatisfied."""
        k = keys = Keys()
        doc = paid_download_doc(k)
        anchors = anchors_for(k, doc)
        pool = paid_evidence(k, T0, designees=("d1", "d2", "d3")) + [
            signers.payment_receipt(keys["pay"], keys["user"].key_id, 5, "USD", "ds1", "small", T0),
            signers.designee_signature(keys["d1"], "ds1", "download", keys["owner"].key_id, T0),
            signers.designee_signature(keys["d2"], "other", "download", keys["user"].key_id, T0),
        ]
        ver = verified(pool, anchors)
        req = policy_from_dict(doc).requirement
        small = [ver[i] for i in base]
        if satisfy_clause(req, small, CTX).satisfied:
            assert satisfy_clause(req, small + [ver[i] for i in extra], CTX).satisfied


class TestSubjectResolution:
    def _results(self, keys, items, doc=None):
        doc = doc or paid_download_doc(keys)
        return satisfy_clause(policy_from_dict(doc).requirement, verified(items, anchors_for(keys, doc)), CTX)

    def test_user_subject(self, keys):
        subject = resolve_subject([self._results(keys, paid_evidence(keys, T0))])
        assert (subject.kind, subject.key_id) == ("user", keys.id("user"))
        assert all(v.subject_key_id == keys.id("user") for v in subject.consumed)

    def test_identity_mismatch(self, keys):
        items = paid_evidence(keys, T0)[:2] + paid_evidence(keys, T0, user="other")[2:]
        result = self._results(keys, items)
        assert result.satisfied
        with pytest.raises(SubjectMismatch):
            resolve_subject([result])

    def test_common_subject_found_among_extras(self, keys):
        # extra evidence for another subject does not spoil agreement
        items = paid_evidence(keys, T0) + paid_evidence(keys, T0, user="other")[2:]
        subject = resolve_subject([self._results(keys, items)])
        assert subject.key_id == keys.id("user")

    def test_tee_override(self, keys):
        doc = templates.render(
            "tee-download",
            policy_id="p1",
            asset_id="ds1",
            owner_key_id=keys.id("owner"),
            designees=[keys.id("d1"), keys.id("d2")],
            payment_services=[keys.id("pay")],
            attesters=[keys.id("att")],
        )
        token = signers.attestation_token(keys["att"], keys.id("tee"), T0)
        subject = resolve_subject([self._results(keys, paid_evidence(keys, T0) + [token], doc)])
        assert (subject.kind, subject.key_id) == ("tee", keys.id("tee"))

    def test_no_subject(self):
        with pytest.raises(NoSubject):
            resolve_subject([])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["user", "other"]), min_size=3, max_size=3))
    def test_soundness(self, owners):
        """A resolved subject is named by every item it consumed."""
        k = keys = Keys()
        items = [
            signers.designee_signature(keys["d1"], "ds1", "download", keys[owners[0]].key_id, T0),
            signers.designee_signature(keys["d2"], "ds1", "download", keys[owners[1]].key_id, T0),
            signers.payment_receipt(keys["pay"], keys[owners[2]].key_id, 10000, "USD", "ds1", "r", T0),
        ]
        result = self._results(k, items)
        if len(set(owners)) == 1:
            subject = resolve_subject([result])
            assert subject.key_id == keys[owners[0]].key_id
            assert {v.subject_key_id for v in subject.consumed} == {subject.key_id}
        else:
            with pytest.raises(SubjectMismatch):
                if not result.satisfied:
                    raise SubjectMismatch("signature clause already split")
                resolve_subject([result])
