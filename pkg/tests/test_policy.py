import copy
import json
from decimal import Decimal
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capguard import templates
from capguard.crypto import canonical_encode
from capguard.errors import ArchivedPolicy, AssetMismatch, OwnerMismatch, ParseError, ValidationError, VersionError
from capguard.policy import (
    MAX_DEPTH,
    AlgorithmConstraint,
    AllOf,
    AnyOf,
    ApprovalRequired,
    AttestationRequired,
    ClaimSet,
    PaymentRequired,
    SignatureRequired,
    clause_depth,
    iter_clauses,
    parse_clause,
    parse_decimal,
    parse_policy,
    policy_digest,
    policy_from_dict,
    validate_update,
)

FIXTURES = Path(__file__).parent / "fixtures" / "policies"
K = [f"{i:x}" * 64 for i in range(1, 10)]


def base_doc(**overrides):
    doc = templates.render("paid-download", owner_key_id=K[0], designees=[K[1], K[2]], payment_services=[K[3]])
    doc.update(overrides)
    return doc


# -- grammar strategy ------------------------------------------------------------------

key_lists = st.lists(st.sampled_from(K), min_size=1, max_size=4, unique=True)
decimals = st.decimals(min_value=-1000, max_value=1000, allow_nan=False, places=3)


@st.composite
def signature_clauses(draw):
    ids = draw(key_lists)
    return SignatureRequired(tuple(ids), draw(st.integers(1, len(ids))))


@st.composite
def algorithm_clauses(draw):
    names = draw(st.lists(st.sampled_from(["local_epochs", "dp_epsilon", "lr"]), unique=True, max_size=3))
    bounds = []
    for n in sorted(names):
        a, b = sorted([draw(decimals), draw(decimals)])
        bounds.append((n, str(a), str(b)))
    algos = draw(st.lists(st.sampled_from(["fedavg", "fedprox", "fedsgd"]), min_size=1, max_size=3, unique=True))
    return AlgorithmConstraint(tuple(algos), tuple(bounds), draw(st.integers(1, 5)))


leaf_clauses = st.one_of(
    signature_clauses(),
    st.builds(
        PaymentRequired,
        key_lists.map(tuple),
        st.integers(0, 10**9),
        st.sampled_from(["USD", "EUR", "CHF"]),
    ),
    st.builds(
        AttestationRequired,
        key_lists.map(tuple),
        st.builds(ClaimSet, st.booleans(), st.integers(0, 4), st.lists(st.sampled_from(K), max_size=2, unique=True).map(tuple)),
        st.just(False),
    ),
    st.builds(ApprovalRequired, key_lists.map(tuple), st.sampled_from(["non-commercial-research", "audit"])),
    algorithm_clauses(),
)

clause_trees = st.recursive(
    leaf_clauses,
    lambda kids: st.lists(kids, min_size=1, max_size=3).flatmap(
        lambda cs: st.sampled_from([AllOf(tuple(cs)), AnyOf(tuple(cs))])
    ),
    max_leaves=12,
)


class TestGrammar:
    @settings(max_examples=200)
    @given(clause_trees)
    def test_closure_round_trip(self, clause):
        """Every well-formed tree serializes and parses back to itself."""
        data = clause.to_dict()
        assert parse_clause(json.loads(json.dumps(data))) == clause
        assert canonical_encode(parse_clause(data).to_dict()) == canonical_encode(data)

    @settings(max_examples=100)
    @given(clause_trees)
    def test_policy_round_trip(self, clause):
        doc = base_doc(requirement=clause.to_dict())
        policy = policy_from_dict(doc)
        assert parse_policy(policy.encode()) == policy
        assert policy_digest(parse_policy(policy.encode())) == policy_digest(policy)

    def test_paths_enumerate_every_clause(self):
        doc = base_doc()
        paths = [p for p, _ in iter_clauses(policy_from_dict(doc).requirement)]
        assert paths == ["requirement", "requirement.children[0]", "requirement.children[1]"]

    def test_depth_limit(self):
        leaf = {"type": "signature_required", "designee_key_ids": [K[1]], "threshold": 1}
        tree = leaf
        for _ in range(MAX_DEPTH - 1):
            tree = {"type": "all_of", "children": [tree]}
        assert clause_depth(parse_clause(tree)) == MAX_DEPTH
        with pytest.raises(ValidationError) as exc:
            parse_clause({"type": "all_of", "children": [tree]})
        assert exc.value.path.count("children[0]") == MAX_DEPTH


class TestValidation:
    @pytest.mark.parametrize(
        "mutate, path",
        [
            (lambda d: d["requirement"]["children"][0].update(threshold=3), "requirement.children[0].threshold"),
            (lambda d: d["requirement"]["children"][0].update(threshold=0), "requirement.children[0].threshold"),
            (lambda d: d["requirement"]["children"][0].update(designee_key_ids=[K[1], K[1]]), "requirement.children[0].designee_key_ids[1]"),
            (lambda d: d["requirement"]["children"][0].update(designee_key_ids=["abc"]), "requirement.children[0].designee_key_ids[0]"),
            (lambda d: d["requirement"]["children"][1].update(currency="usd"), "requirement.children[1].currency"),
            (lambda d: d["requirement"]["children"][1].update(min_amount_minor=-1), "requirement.children[1].min_amount_minor"),
            (lambda d: d["requirement"]["children"][1].update(extra=1), "requirement.children[1].extra"),
            (lambda d: d["requirement"]["children"][1].pop("currency"), "requirement.children[1].currency"),
            (lambda d: d["requirement"]["children"].append({"type": "nope"}), "requirement.children[2].type"),
            (lambda d: d["requirement"].update(children=[]), "requirement.children"),
            (lambda d: d.update(version=0), "version"),
            (lambda d: d.update(status="live"), "status"),
            (lambda d: d.update(governance_tags=["fairness"]), "governance_tags[0]"),
            (lambda d: d.update(owner_key_id="ABC"), "owner_key_id"),
            (lambda d: d.update(capability_ttl_seconds=0), "capability_ttl_seconds"),
            (lambda d: d.update(operations=[]), "operations"),
            (lambda d: d.update(policy_id="has space"), "policy_id"),
            (lambda d: d.update(colour="red"), "colour"),
            (lambda d: d.pop("requirement"), "requirement"),
        ],
    )
    def test_invalid_documents_name_the_field(self, mutate, path):
        doc = base_doc()
        mutate(doc)
        with pytest.raises(ValidationError) as exc:
            policy_from_dict(doc)
        assert exc.value.path == path

    def test_param_bounds_min_above_max(self):
        clause = templates.algorithm_clause(["fedavg"], {"dp_epsilon": {"min": "8.0", "max": "0.1"}})
        with pytest.raises(ValidationError) as exc:
            parse_clause(clause)
        assert exc.value.path == "requirement.param_bounds.dp_epsilon"

    @pytest.mark.parametrize("text", ["1.0e", "nan", "Infinity", "", "1,5", " 1"])
    def test_bad_decimal_strings(self, text):
        with pytest.raises(ValidationError):
            parse_decimal(text)

    def test_decimal_is_exact(self):
        assert parse_decimal("0.1") + parse_decimal("0.2") == Decimal("0.3")

    def test_two_overrides_rejected(self):
        att = templates.attestation_clause([K[4]])
        doc = base_doc(requirement={"type": "all_of", "children": [att, copy.deepcopy(att)]})
        with pytest.raises(ValidationError) as exc:
            policy_from_dict(doc)
        assert exc.value.path == "requirement.children[1]"

    @pytest.mark.parametrize("text", [b"{", b'{"version":1.0}', b"[]", b'{"a":1,"a":1}'])
    def test_parse_errors(self, text):
        with pytest.raises((ParseError, ValidationError)):
            parse_policy(text)


class TestUpdates:
    def test_next_version_accepted(self):
        old = policy_from_dict(base_doc())
        validate_update(old, policy_from_dict(base_doc(version=2)))

    @pytest.mark.parametrize("version", [1, 3, 10])
    def test_version_must_increment_by_one(self, version):
        with pytest.raises(VersionError):
            validate_update(policy_from_dict(base_doc()), policy_from_dict(base_doc(version=version)))

    def test_owner_and_asset_fixed(self):
        old = policy_from_dict(base_doc())
        with pytest.raises(OwnerMismatch):
            validate_update(old, policy_from_dict(base_doc(version=2, owner_key_id=K[5])))
        with pytest.raises(AssetMismatch):
            validate_update(old, policy_from_dict(base_doc(version=2, asset_id="other")))

    def test_archived_is_frozen(self):
        old = policy_from_dict(base_doc()).with_status("archived")
        with pytest.raises(ArchivedPolicy):
            validate_update(old, policy_from_dict(base_doc(version=2)))

    def test_digest_changes_with_any_field(self):
        a = policy_from_dict(base_doc())
        assert policy_digest(a) != policy_digest(a.with_status("registered"))
        assert policy_digest(a) != policy_digest(policy_from_dict(base_doc(capability_ttl_seconds=60)))


class TestTemplates:
    def test_paid_download_shape(self):
        doc = templates.render("paid-download")
        kinds = [c["type"] for c in doc["requirement"]["children"]]
        assert doc["requirement"]["type"] == "all_of" and kinds == ["signature_required", "payment_required"]

    def test_placeholders_until_keys_given(self):
        assert templates.PLACEHOLDER in canonical_encode(templates.render("tee-download")).decode()

    def test_fedavg_study(self):
        doc = templates.render("fedavg-study", owner_key_id=K[0], approvers=[K[1]], attesters=[K[2]])
        policy = policy_from_dict(doc)
        assert policy.operations == ("execute:fedavg",)
        algo = policy.requirement.children[1]
        assert algo.allowed_algorithms == ("fedavg",) and algo.min_clients == 2

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            templates.render("nope")


class TestGoldenCorpus:
    @pytest.mark.parametrize("name", sorted(p.stem for p in FIXTURES.glob("*.json")))
    def test_canonical_bytes_frozen(self, name):
        source = (FIXTURES / f"{name}.json").read_bytes()
        golden = (FIXTURES / f"{name}.golden").read_bytes()
        policy = parse_policy(source)
        assert policy.encode() == golden
        assert parse_policy(golden).encode() == golden
        # independent route: stdlib json with the canonical options
        assert json.dumps(json.loads(source), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode() == golden
