"""Evidence items, trust anchors, per-item verification and clause satisfaction."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from . import crypto
from .crypto import KeyPair, canonical_encode, digest_value
from .errors import (
    BadSignature,
    FutureTimestamp,
    NoSubject,
    ParseError,
    SchemaError,
    StaleEvidence,
    SubjectMismatch,
    UnknownIssuer,
    ValidationError,
)
from .policy import (
    AlgorithmConstraint,
    AllOf,
    AnyOf,
    ApprovalRequired,
    AttestationRequired,
    Clause,
    PaymentRequired,
    PolicyObject,
    SignatureRequired,
    iter_clauses,
    parse_decimal,
)

DEFAULT_MAX_AGE_SECONDS = 86400
CLOCK_SKEW_SECONDS = 300
MAX_BUNDLE_ITEMS = 64

EVIDENCE_TYPES = ("designee_signature", "payment_receipt", "attestation_token", "approval", "compute_spec")

# evidence type -> anchor role (None: self-signed by the subject)
ANCHOR_ROLE = {
    "designee_signature": "designees",
    "payment_receipt": "payment_services",
    "attestation_token": "attesters",
    "approval": "approvers",
    "compute_spec": None,
}

SUBJECT_FIELD = {
    "designee_signature": "subject_key_id",
    "payment_receipt": "payer_subject_key_id",
    "attestation_token": "tee_subject_key_id",
    "approval": "subject_key_id",
    "compute_spec": "subject_key_id",
}

_HEX = re.compile(r"^[0-9a-f]+$")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


# -- wire types ----------------------------------------------------------------


@dataclass(frozen=True)
class EvidenceItem:
    evidence_type: str
    issuer_key_id: str
    payload: Dict[str, Any]
    signature: bytes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "evidence_type": self.evidence_type,
            "issuer_key_id": self.issuer_key_id,
            "payload": self.payload,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, data: Any) -> "EvidenceItem":
        if not isinstance(data, dict) or set(data) != {"evidence_type", "issuer_key_id", "payload", "signature"}:
            raise SchemaError("evidence item must have exactly evidence_type, issuer_key_id, payload, signature")
        if data["evidence_type"] not in EVIDENCE_TYPES:
            raise SchemaError(f"unknown evidence type {data['evidence_type']!r}")
        if not isinstance(data["issuer_key_id"], str) or not _HEX64.match(data["issuer_key_id"]):
            raise SchemaError("issuer_key_id must be a 64-char hex key id")
        if not isinstance(data["payload"], dict):
            raise SchemaError("payload must be a map")
        sig = data["signature"]
        if not isinstance(sig, str) or len(sig) != 128 or not _HEX.match(sig):
            raise SchemaError("signature must be 128 hex chars")
        return cls(data["evidence_type"], data["issuer_key_id"], data["payload"], bytes.fromhex(sig))

    @property
    def signed_bytes(self) -> bytes:
        return canonical_encode(self.payload)


@dataclass(frozen=True)
class EvidenceBundle:
    items: Tuple[EvidenceItem, ...]
    submitted_by_key_id: str

    def to_dict(self) -> Dict[str, Any]:
        return {"items": [i.to_dict() for i in self.items], "submitted_by_key_id": self.submitted_by_key_id}

    @classmethod
    def from_dict(cls, data: Any) -> "EvidenceBundle":
        if not isinstance(data, dict) or set(data) != {"items", "submitted_by_key_id"}:
            raise SchemaError("bundle must have exactly items and submitted_by_key_id")
        if not isinstance(data["items"], list):
            raise SchemaError("items must be a list")
        if len(data["items"]) > MAX_BUNDLE_ITEMS:
            raise SchemaError(f"bundle holds more than {MAX_BUNDLE_ITEMS} items")
        sub = data["submitted_by_key_id"]
        if not isinstance(sub, str) or not _HEX64.match(sub):
            raise SchemaError("submitted_by_key_id must be a 64-char hex key id")
        return cls(tuple(EvidenceItem.from_dict(i) for i in data["items"]), sub)

    def digest(self) -> str:
        return digest_value(self.to_dict())


@dataclass
class TrustAnchors:
    designees: Dict[str, bytes] = field(default_factory=dict)
    payment_services: Dict[str, bytes] = field(default_factory=dict)
    attesters: Dict[str, bytes] = field(default_factory=dict)
    approvers: Dict[str, bytes] = field(default_factory=dict)

    ROLES = ("designees", "payment_services", "attesters", "approvers")

    def lookup(self, role: str, key_id: str) -> Optional[bytes]:
        return getattr(self, role).get(key_id)

    def to_dict(self) -> Dict[str, Dict[str, str]]:
        return {role: {k: v.hex() for k, v in getattr(self, role).items()} for role in self.ROLES}

    @classmethod
    def from_dict(cls, data: Any) -> "TrustAnchors":
        if not isinstance(data, dict) or not set(data) <= set(cls.ROLES):
            raise SchemaError(f"trust anchors must be a map over {cls.ROLES}")
        anchors = cls()
        for role, keys in data.items():
            if not isinstance(keys, dict):
                raise SchemaError(f"trust anchors {role} must be a map key_id -> public key")
            for key_id, pub in keys.items():
                try:
                    raw = crypto.public_key_from_id(pub)
                except ValueError as exc:
                    raise SchemaError(f"trust anchors {role}: {exc}") from None
                if key_id != pub:
                    raise SchemaError(f"trust anchors {role}: key id {key_id} does not match its public key")
                getattr(anchors, role)[key_id] = raw
        return anchors

    @classmethod
    def from_policy(cls, policy: PolicyObject) -> "TrustAnchors":
        """Anchors implied by the key ids the policy's clauses name."""
        anchors = cls()
        for _, clause in iter_clauses(policy.requirement):
            if isinstance(clause, SignatureRequired):
                role, ids = anchors.designees, clause.designee_key_ids
            elif isinstance(clause, PaymentRequired):
                role, ids = anchors.payment_services, clause.service_key_ids
            elif isinstance(clause, AttestationRequired):
                role, ids = anchors.attesters, clause.attester_key_ids
            elif isinstance(clause, ApprovalRequired):
                role, ids = anchors.approvers, clause.approver_key_ids
            else:
                continue
            for k in ids:
                role[k] = crypto.public_key_from_id(k)
        return anchors


# -- payload schemas -------------------------------------------------------------


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise SchemaError(message)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_key_id(v: Any) -> bool:
    return isinstance(v, str) and bool(_HEX64.match(v))


def _is_str(v: Any) -> bool:
    return isinstance(v, str) and bool(v)


def _check_payload(evidence_type: str, p: Dict[str, Any]) -> None:
    fields = {
        "designee_signature": {"asset_id", "operation", "subject_key_id", "issued_at"},
        "payment_receipt": {"payer_subject_key_id", "amount_minor", "currency", "asset_id", "receipt_id", "issued_at"},
        "attestation_token": {"tee_subject_key_id", "claims", "issued_at"},
        "approval": {"subject_key_id", "scope", "document_digest", "issued_at"},
        "compute_spec": {"subject_key_id", "algorithm", "params", "client_count", "dataset_ids", "issued_at"},
    }[evidence_type]
    _require(set(p) == fields, f"{evidence_type} payload must have exactly {sorted(fields)}")
    _require(_is_int(p["issued_at"]), "issued_at must be an integer")
    _require(_is_key_id(p[SUBJECT_FIELD[evidence_type]]), "subject key id must be a 64-char hex key id")

    if evidence_type == "designee_signature":
        _require(_is_str(p["asset_id"]) and _is_str(p["operation"]), "asset_id/operation must be strings")
    elif evidence_type == "payment_receipt":
        _require(_is_int(p["amount_minor"]) and p["amount_minor"] >= 0, "amount_minor must be a non-negative integer")
        for name in ("currency", "asset_id", "receipt_id"):
            _require(_is_str(p[name]), f"{name} must be a string")
    elif evidence_type == "attestation_token":
        claims = p["claims"]
        _require(
            isinstance(claims, dict) and set(claims) == {"ssh_disabled", "ingress_ports", "code_measurement"},
            "claims must have exactly ssh_disabled, ingress_ports, code_measurement",
        )
        _require(isinstance(claims["ssh_disabled"], bool), "ssh_disabled must be a boolean")
        ports = claims["ingress_ports"]
        _require(isinstance(ports, list) and all(_is_int(x) for x in ports), "ingress_ports must be integers")
        _require(
            isinstance(claims["code_measurement"], str) and bool(_HEX.match(claims["code_measurement"])),
            "code_measurement must be hex",
        )
    elif evidence_type == "approval":
        _require(_is_str(p["scope"]), "scope must be a string")
        _require(isinstance(p["document_digest"], str) and bool(_HEX64.match(p["document_digest"])), "document_digest must be hex")
    else:
        _require(_is_str(p["algorithm"]), "algorithm must be a string")
        _require(isinstance(p["params"], dict), "params must be a map")
        for name, value in p["params"].items():
            try:
                parse_decimal(value, f"params.{name}")
            except ValidationError as exc:
                raise SchemaError(str(exc)) from None
        _require(_is_int(p["client_count"]) and p["client_count"] >= 1, "client_count must be a positive integer")
        ids = p["dataset_ids"]
        _require(isinstance(ids, list) and ids and all(_is_str(x) for x in ids), "dataset_ids must be non-empty strings")
        _require(len(set(ids)) == len(ids), "dataset_ids must be unique")


def make_item(evidence_type: str, issuer: KeyPair, payload: Dict[str, Any]) -> EvidenceItem:
    """Sign ``payload`` as ``issuer``; the mock evidence services use this."""
    if evidence_type not in EVIDENCE_TYPES:
        raise SchemaError(f"unknown evidence type {evidence_type!r}")
    _check_payload(evidence_type, payload)
    sig = crypto.sign(issuer.private_key, canonical_encode(payload))
    return EvidenceItem(evidence_type, issuer.key_id, payload, sig)


def compute_spec_body(payload: Mapping[str, Any]) -> Dict[str, Any]:
    """The part of a compute_spec payload that guardians execute."""
    return {
        "algorithm": payload["algorithm"],
        "params": dict(payload["params"]),
        "client_count": payload["client_count"],
        "dataset_ids": list(payload["dataset_ids"]),
    }


# -- verification --------------------------------------------------------------------


@dataclass(frozen=True)
class VerifiedItem:
    item: EvidenceItem
    subject_key_id: str
    index: int = 0

    @property
    def evidence_type(self) -> str:
        return self.item.evidence_type

    @property
    def payload(self) -> Dict[str, Any]:
        return self.item.payload


def verify_item(
    item: EvidenceItem,
    anchors: TrustAnchors,
    now: int,
    max_age_seconds: int = DEFAULT_MAX_AGE_SECONDS,
    clock_skew: int = CLOCK_SKEW_SECONDS,
    index: int = 0,
) -> VerifiedItem:
    _check_payload(item.evidence_type, item.payload)
    subject = item.payload[SUBJECT_FIELD[item.evidence_type]]
    role = ANCHOR_ROLE[item.evidence_type]
    if role is None:
        # self-asserted: the subject signs their own compute spec
        if item.issuer_key_id != subject:
            raise UnknownIssuer("compute_spec must be signed by its subject")
        public = crypto.public_key_from_id(subject)
    else:
        public = anchors.lookup(role, item.issuer_key_id)
        if public is None:
            raise UnknownIssuer(f"{item.issuer_key_id[:16]}... is not an anchored {role[:-1]}")
    if not crypto.verify(public, item.signed_bytes, item.signature):
        raise BadSignature(f"{item.evidence_type} signature does not verify")
    issued = item.payload["issued_at"]
    if issued < now - max_age_seconds:
        raise StaleEvidence(f"issued_at {issued} older than {max_age_seconds}s")
    if issued > now + clock_skew:
        raise FutureTimestamp(f"issued_at {issued} is in the future")
    return VerifiedItem(item, subject, index)


# -- clause satisfaction ----------------------------------------------------------------


@dataclass(frozen=True)
class ClauseResult:
    path: str
    clause_type: str
    satisfied: bool
    reason: str = ""
    consumed: Tuple[VerifiedItem, ...] = ()
    # every subject for which this clause is satisfied on its own
    subjects: FrozenSet[str] = frozenset()
    children: Tuple["ClauseResult", ...] = ()
    subject_override: bool = False

    @property
    def subject_key_id(self) -> Optional[str]:
        return min(self.subjects) if self.subjects else None

    def failures(self) -> List["ClauseResult"]:
        """Unsatisfied leaves under this node (all of them, for feedback)."""
        if self.satisfied:
            return []
        if not self.children:
            return [self]
        out: List[ClauseResult] = []
        for c in self.children:
            out.extend(c.failures())
        return out


def _unsat(path: str, clause: Clause, reason: str) -> ClauseResult:
    return ClauseResult(path, clause.type, False, reason)


def _sat(path: str, clause: Clause, consumed: Sequence[VerifiedItem], subjects: Iterable[str], **kw: Any) -> ClauseResult:
    return ClauseResult(path, clause.type, True, "", tuple(consumed), frozenset(subjects), **kw)


def _of_type(items: Sequence[VerifiedItem], evidence_type: str) -> List[VerifiedItem]:
    return [v for v in items if v.evidence_type == evidence_type]


def _satisfy_signatures(clause: SignatureRequired, items, ctx, path) -> ClauseResult:
    designees = set(clause.designee_key_ids)
    by_subject: Dict[str, Dict[str, VerifiedItem]] = {}
    for v in _of_type(items, "designee_signature"):
        p = v.payload
        if v.item.issuer_key_id not in designees:
            continue
        if p["asset_id"] != ctx["asset_id"] or p["operation"] != ctx["operation"]:
            continue
        by_subject.setdefault(v.subject_key_id, {}).setdefault(v.item.issuer_key_id, v)
    winners = {s: signers for s, signers in by_subject.items() if len(signers) >= clause.threshold}
    if not winners:
        best = max((len(s) for s in by_subject.values()), default=0)
        return _unsat(path, clause, f"distinct designees: {best} < {clause.threshold}")
    consumed = [v for s in sorted(winners) for v in winners[s].values()]
    return _sat(path, clause, consumed, winners)


def _satisfy_payment(clause: PaymentRequired, items, ctx, path) -> ClauseResult:
    services = set(clause.service_key_ids)
    receipts = _of_type(items, "payment_receipt")
    good, problems = [], []
    for v in receipts:
        p = v.payload
        if v.item.issuer_key_id not in services:
            problems.append("receipt from a service this clause does not name")
        elif p["asset_id"] != ctx["asset_id"]:
            problems.append(f"receipt is for asset {p['asset_id']!r}")
        elif p["currency"] != clause.currency:
            problems.append(f"currency {p['currency']} != {clause.currency}")
        elif p["amount_minor"] < clause.min_amount_minor:
            problems.append(f"amount {p['amount_minor']} < {clause.min_amount_minor} {clause.currency}")
        else:
            good.append(v)
    if not good:
        detail = "; ".join(problems) if problems else "no payment receipt"
        return _unsat(path, clause, f"payment not satisfied: {detail}")
    return _sat(path, clause, good, {v.subject_key_id for v in good})


def claims_satisfied(claims: Mapping[str, Any], required) -> Optional[str]:
    """None when ``claims`` meet the ClaimSet, else the first failing claim."""
    if required.ssh_disabled and claims["ssh_disabled"] is not True:
        return "ssh is not disabled"
    if len(claims["ingress_ports"]) > required.max_ingress_ports:
        return f"{len(claims['ingress_ports'])} ingress ports open > {required.max_ingress_ports}"
    allowed = required.allowed_code_measurements
    if allowed and claims["code_measurement"] not in allowed:
        return "code measurement not in the allowed set"
    return None


def _satisfy_attestation(clause: AttestationRequired, items, ctx, path) -> ClauseResult:
    attesters = set(clause.attester_key_ids)
    good, problems = [], []
    for v in _of_type(items, "attestation_token"):
        if v.item.issuer_key_id not in attesters:
            problems.append("token from an attester this clause does not name")
            continue
        failure = claims_satisfied(v.payload["claims"], clause.required_claims)
        if failure:
            problems.append(failure)
        else:
            good.append(v)
    if not good:
        detail = "; ".join(problems) if problems else "no attestation token"
        return _unsat(path, clause, f"attestation not satisfied: {detail}")
    return _sat(path, clause, good, {v.subject_key_id for v in good}, subject_override=clause.subject_override)


def _satisfy_approval(clause: ApprovalRequired, items, ctx, path) -> ClauseResult:
    approvers = set(clause.approver_key_ids)
    good = [
        v
        for v in _of_type(items, "approval")
        if v.item.issuer_key_id in approvers and v.payload["scope"] == clause.scope
    ]
    if not good:
        return _unsat(path, clause, f"no approval for scope {clause.scope!r} from a named approver")
    return _sat(path, clause, good, {v.subject_key_id for v in good})


def spec_violation(clause: AlgorithmConstraint, payload: Mapping[str, Any], asset_id: Optional[str] = None) -> Optional[str]:
    """None when a compute_spec payload satisfies the constraint."""
    if payload["algorithm"] not in clause.allowed_algorithms:
        return f"algorithm not allowed: {payload['algorithm']!r} not in {list(clause.allowed_algorithms)}"
    params = payload["params"]
    for name, (lo, hi) in clause.bounds().items():
        if name not in params:
            return f"parameter {name} missing"
        value = Decimal(params[name])
        if value < lo or value > hi:
            return f"parameter {name}={params[name]} outside [{lo}, {hi}]"
    if payload["client_count"] < clause.min_clients:
        return f"client_count {payload['client_count']} < min_clients {clause.min_clients}"
    if len(payload["dataset_ids"]) != payload["client_count"]:
        return "dataset_ids length differs from client_count"
    if asset_id is not None and asset_id not in payload["dataset_ids"]:
        return f"spec does not include asset {asset_id!r}"
    return None


def _satisfy_algorithm(clause: AlgorithmConstraint, items, ctx, path) -> ClauseResult:
    good, problems = [], []
    for v in _of_type(items, "compute_spec"):
        failure = spec_violation(clause, v.payload, ctx["asset_id"])
        if failure:
            problems.append(failure)
        else:
            good.append(v)
    if not good:
        return _unsat(path, clause, "; ".join(problems) if problems else "no compute_spec evidence")
    return _sat(path, clause, good, {v.subject_key_id for v in good})


_LEAF = {
    "signature_required": _satisfy_signatures,
    "payment_required": _satisfy_payment,
    "attestation_required": _satisfy_attestation,
    "approval_required": _satisfy_approval,
    "algorithm_constraint": _satisfy_algorithm,
}


def satisfy_clause(
    clause: Clause,
    verified: Sequence[VerifiedItem],
    context: Mapping[str, str],
    path: str = "requirement",
) -> ClauseResult:
    if isinstance(clause, (AllOf, AnyOf)):
        kids = tuple(
            satisfy_clause(c, verified, context, f"{path}.children[{i}]") for i, c in enumerate(clause.children)
        )
        n_ok = sum(k.satisfied for k in kids)
        if isinstance(clause, AllOf):
            ok = n_ok == len(kids)
            reason = "" if ok else f"{len(kids) - n_ok} of {len(kids)} required clauses unsatisfied"
        else:
            ok = n_ok > 0
            reason = "" if ok else "no alternative satisfied"
        return ClauseResult(path, clause.type, ok, reason, children=kids)
    return _LEAF[clause.type](clause, verified, context, path)


# -- subject resolution ------------------------------------------------------------


@dataclass(frozen=True)
class Subject:
    kind: str  # "user" | "tee"
    key_id: str
    consumed: Tuple[VerifiedItem, ...] = ()

    def to_dict(self) -> Dict[str, str]:
        return {"kind": self.kind, "key_id": self.key_id}


def _satisfied_leaves(result: ClauseResult) -> List[ClauseResult]:
    if not result.satisfied:
        return []
    if not result.children:
        return [result]
    out: List[ClauseResult] = []
    for c in result.children:
        out.extend(_satisfied_leaves(c))
    return out


def resolve_subject(results: Sequence[ClauseResult], policy: Optional[PolicyObject] = None) -> Subject:
    """Agree on one identity across the satisfied clauses.

    Attestation clauses speak about hardware, not the user; one with
    ``subject_override`` replaces the user with the attested TEE.
    """
    leaves = [leaf for r in results for leaf in _satisfied_leaves(r)]
    user_leaves = [leaf for leaf in leaves if leaf.clause_type != "attestation_required"]
    override = [leaf for leaf in leaves if leaf.clause_type == "attestation_required" and leaf.subject_override]

    user: Optional[str] = None
    consumed: List[VerifiedItem] = []
    if user_leaves:
        common = frozenset.intersection(*(leaf.subjects for leaf in user_leaves))
        if not common:
            seen = sorted({s[:12] for leaf in user_leaves for s in leaf.subjects})
            raise SubjectMismatch(f"evidence names different subjects: {', '.join(seen)}")
        user = min(common)
        consumed = [v for leaf in user_leaves for v in leaf.consumed if v.subject_key_id == user]

    if override:
        tee = min(override[0].subjects)
        tee_items = [v for v in override[0].consumed if v.subject_key_id == tee]
        return Subject("tee", tee, tuple(consumed + tee_items))
    if user is None:
        raise NoSubject("no satisfied clause names a subject")
    return Subject("user", user, tuple(consumed))


def denial_reasons(result: ClauseResult) -> List[Dict[str, str]]:
    return [
        {"clause_path": f.path, "clause_type": f.clause_type, "code": "ClauseUnsatisfied", "reason": f.reason}
        for f in result.failures()
    ]


def parse_bundle(document: bytes | str) -> EvidenceBundle:
    try:
        data = crypto.canonical_decode(document)
    except ParseError as exc:
        raise SchemaError(f"bundle is not valid JSON: {exc}") from None
    return EvidenceBundle.from_dict(data)
