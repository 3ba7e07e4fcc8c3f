"""Policy objects: clause grammar, validation, versioning and digests.

A policy document is canonical JSON whose top-level fields mirror
:class:`PolicyObject`. Clauses are discriminated by their ``type`` field.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from .crypto import canonical_decode, canonical_encode, digest, public_key_from_id
from .errors import (
    ArchivedPolicy,
    AssetMismatch,
    OwnerMismatch,
    ParseError,
    ValidationError,
    VersionError,
)

MAX_DEPTH = 16
DEFAULT_TTL_SECONDS = 3600
STATUSES = ("draft", "registered", "revoked", "archived")
GOVERNANCE_TAGS = ("accountability_oversight", "protection_integrity", "transparency_monitoring")

_IDENT = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._:-]{0,127}$")
_CURRENCY = re.compile(r"^[A-Z]{3}$")
_DECIMAL = re.compile(r"^-?\d+(\.\d+)?([eE][-+]?\d+)?$")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def parse_decimal(text: Any, path: str = "value") -> Decimal:
    """Exact decimal from a wire decimal string (no binary floats involved)."""
    if not isinstance(text, str) or not _DECIMAL.match(text):
        raise ValidationError(path, f"not a decimal string: {text!r}")
    try:
        value = Decimal(text)
    except InvalidOperation:
        raise ValidationError(path, f"not a decimal string: {text!r}") from None
    if not value.is_finite():
        raise ValidationError(path, "decimal must be finite")
    return value


@dataclass(frozen=True)
class ClaimSet:
    ssh_disabled: bool
    max_ingress_ports: int
    allowed_code_measurements: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ssh_disabled": self.ssh_disabled,
            "max_ingress_ports": self.max_ingress_ports,
            "allowed_code_measurements": list(self.allowed_code_measurements),
        }


@dataclass(frozen=True)
class AllOf:
    children: Tuple["Clause", ...]
    type = "all_of"

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type, "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class AnyOf:
    children: Tuple["Clause", ...]
    type = "any_of"

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type, "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class SignatureRequired:
    designee_key_ids: Tuple[str, ...]
    threshold: int
    type = "signature_required"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": self.type,
            "designee_key_ids": list(self.designee_key_ids),
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class PaymentRequired:
    service_key_ids: Tuple[str, ...]
    min_amount_minor: int
    currency: str
    type = "payment_required"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": self.type,
            "service_key_ids": list(self.service_key_ids),
            "min_amount_minor": self.min_amount_minor,
            "currency": self.currency,
        }


@dataclass(frozen=True)
class AttestationRequired:
    attester_key_ids: Tuple[str, ...]
    required_claims: ClaimSet
    subject_override: bool = False
    type = "attestation_required"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": self.type,
            "attester_key_ids": list(self.attester_key_ids),
            "required_claims": self.required_claims.to_dict(),
            "subject_override": self.subject_override,
        }


@dataclass(frozen=True)
class ApprovalRequired:
    approver_key_ids: Tuple[str, ...]
    scope: str
    type = "approval_required"

    def to_dict(self) -> Dict[str, Any]:
        return {"type": self.type, "approver_key_ids": list(self.approver_key_ids), "scope": self.scope}


@dataclass(frozen=True)
class AlgorithmConstraint:
    allowed_algorithms: Tuple[str, ...]
    # name -> (min, max) as the original decimal strings
    param_bounds: Tuple[Tuple[str, str, str], ...]
    min_clients: int
    type = "algorithm_constraint"

    def bounds(self) -> Dict[str, Tuple[Decimal, Decimal]]:
        return {name: (Decimal(lo), Decimal(hi)) for name, lo, hi in self.param_bounds}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": self.type,
            "allowed_algorithms": list(self.allowed_algorithms),
            "param_bounds": {name: {"min": lo, "max": hi} for name, lo, hi in self.param_bounds},
            "min_clients": self.min_clients,
        }


Clause = Union[
    AllOf, AnyOf, SignatureRequired, PaymentRequired, AttestationRequired, ApprovalRequired, AlgorithmConstraint
]
LEAF_TYPES = (SignatureRequired, PaymentRequired, AttestationRequired, ApprovalRequired, AlgorithmConstraint)


def iter_clauses(clause: Clause, path: str = "requirement") -> Iterator[Tuple[str, Clause]]:
    """Pre-order walk yielding ``(path, clause)``."""
    yield path, clause
    if isinstance(clause, (AllOf, AnyOf)):
        for i, child in enumerate(clause.children):
            yield from iter_clauses(child, f"{path}.children[{i}]")


def clause_depth(clause: Clause) -> int:
    if isinstance(clause, (AllOf, AnyOf)):
        return 1 + max(clause_depth(c) for c in clause.children)
    return 1


@dataclass(frozen=True)
class PolicyObject:
    policy_id: str
    version: int
    asset_id: str
    owner_key_id: str
    operations: Tuple[str, ...]
    requirement: Clause
    capability_ttl_seconds: int = DEFAULT_TTL_SECONDS
    single_use: bool = False
    status: str = "draft"
    governance_tags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy_id": self.policy_id,
            "version": self.version,
            "asset_id": self.asset_id,
            "owner_key_id": self.owner_key_id,
            "operations": list(self.operations),
            "requirement": self.requirement.to_dict(),
            "capability_ttl_seconds": self.capability_ttl_seconds,
            "single_use": self.single_use,
            "status": self.status,
            "governance_tags": list(self.governance_tags),
        }

    def encode(self) -> bytes:
        return canonical_encode(self.to_dict())

    def with_status(self, status: str) -> "PolicyObject":
        return replace(self, status=status)


# -- parsing -----------------------------------------------------------------

_POLICY_FIELDS = {
    "policy_id",
    "version",
    "asset_id",
    "owner_key_id",
    "operations",
    "requirement",
    "capability_ttl_seconds",
    "single_use",
    "status",
    "governance_tags",
}
_REQUIRED_POLICY_FIELDS = {"policy_id", "version", "asset_id", "owner_key_id", "operations", "requirement"}

_CLAUSE_FIELDS = {
    "all_of": {"children"},
    "any_of": {"children"},
    "signature_required": {"designee_key_ids", "threshold"},
    "payment_required": {"service_key_ids", "min_amount_minor", "currency"},
    "attestation_required": {"attester_key_ids", "required_claims", "subject_override"},
    "approval_required": {"approver_key_ids", "scope"},
    "algorithm_constraint": {"allowed_algorithms", "param_bounds", "min_clients"},
}
_OPTIONAL_CLAUSE_FIELDS = {"attestation_required": {"subject_override"}, "algorithm_constraint": {"param_bounds"}}


def _expect_map(value: Any, path: str) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ValidationError(path, "expected a map")
    return value


def _expect_int(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(path, "expected an integer")
    if minimum is not None and value < minimum:
        raise ValidationError(path, f"must be >= {minimum}")
    return value


def _expect_bool(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(path, "expected a boolean")
    return value


def _expect_str(value: Any, path: str, pattern: Optional[re.Pattern] = None) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(path, "expected a non-empty string")
    if pattern is not None and not pattern.match(value):
        raise ValidationError(path, f"malformed value {value!r}")
    return value


def _expect_list(value: Any, path: str, non_empty: bool = True) -> List[Any]:
    if not isinstance(value, list):
        raise ValidationError(path, "expected a list")
    if non_empty and not value:
        raise ValidationError(path, "must not be empty")
    return value


def _key_ids(value: Any, path: str) -> Tuple[str, ...]:
    items = _expect_list(value, path)
    out = []
    for i, k in enumerate(items):
        if not isinstance(k, str) or not _HEX64.match(k):
            raise ValidationError(f"{path}[{i}]", "expected a 64-char lowercase hex key id")
        if k in out:
            raise ValidationError(f"{path}[{i}]", "duplicate key id")
        public_key_from_id(k)
        out.append(k)
    return tuple(out)


def _strings(value: Any, path: str, non_empty: bool = True) -> Tuple[str, ...]:
    items = _expect_list(value, path, non_empty=non_empty)
    out: List[str] = []
    for i, v in enumerate(items):
        if _expect_str(v, f"{path}[{i}]") in out:
            raise ValidationError(f"{path}[{i}]", "duplicate entry")
        out.append(v)
    return tuple(out)


def _check_fields(data: Dict[str, Any], allowed: set, required: set, path: str) -> None:
    for name in sorted(data):
        if name not in allowed:
            raise ValidationError(f"{path}.{name}", "unknown field")
    for name in sorted(required):
        if name not in data:
            raise ValidationError(f"{path}.{name}", "missing field")


def parse_clause(data: Any, path: str = "requirement", depth: int = 1) -> Clause:
    if depth > MAX_DEPTH:
        raise ValidationError(path, f"clause tree deeper than {MAX_DEPTH}")
    data = _expect_map(data, path)
    ctype = data.get("type")
    if ctype not in _CLAUSE_FIELDS:
        raise ValidationError(f"{path}.type", f"unknown clause type {ctype!r}")
    allowed = _CLAUSE_FIELDS[ctype]
    body = {k: v for k, v in data.items() if k != "type"}
    _check_fields(body, allowed, allowed - _OPTIONAL_CLAUSE_FIELDS.get(ctype, set()), path)

    if ctype in ("all_of", "any_of"):
        kids = _expect_list(body["children"], f"{path}.children")
        children = tuple(
            parse_clause(c, f"{path}.children[{i}]", depth + 1) for i, c in enumerate(kids)
        )
        return AllOf(children) if ctype == "all_of" else AnyOf(children)

    if ctype == "signature_required":
        designees = _key_ids(body["designee_key_ids"], f"{path}.designee_key_ids")
        threshold = _expect_int(body["threshold"], f"{path}.threshold", minimum=1)
        if threshold > len(designees):
            raise ValidationError(
                f"{path}.threshold", f"threshold {threshold} exceeds {len(designees)} designees"
            )
        return SignatureRequired(designees, threshold)

    if ctype == "payment_required":
        return PaymentRequired(
            _key_ids(body["service_key_ids"], f"{path}.service_key_ids"),
            _expect_int(body["min_amount_minor"], f"{path}.min_amount_minor", minimum=0),
            _expect_str(body["currency"], f"{path}.currency", _CURRENCY),
        )

    if ctype == "attestation_required":
        cpath = f"{path}.required_claims"
        claims = _expect_map(body["required_claims"], cpath)
        fields = {"ssh_disabled", "max_ingress_ports", "allowed_code_measurements"}
        _check_fields(claims, fields, {"ssh_disabled", "max_ingress_ports"}, cpath)
        measurements = _expect_list(
            claims.get("allowed_code_measurements", []), f"{cpath}.allowed_code_measurements", non_empty=False
        )
        for i, m in enumerate(measurements):
            _expect_str(m, f"{cpath}.allowed_code_measurements[{i}]", _HEX64)
        claim_set = ClaimSet(
            _expect_bool(claims["ssh_disabled"], f"{cpath}.ssh_disabled"),
            _expect_int(claims["max_ingress_ports"], f"{cpath}.max_ingress_ports", minimum=0),
            tuple(measurements),
        )
        return AttestationRequired(
            _key_ids(body["attester_key_ids"], f"{path}.attester_key_ids"),
            claim_set,
            _expect_bool(body.get("subject_override", False), f"{path}.subject_override"),
        )

    if ctype == "approval_required":
        return ApprovalRequired(
            _key_ids(body["approver_key_ids"], f"{path}.approver_key_ids"),
            _expect_str(body["scope"], f"{path}.scope"),
        )

    # algorithm_constraint
    bpath = f"{path}.param_bounds"
    raw_bounds = _expect_map(body.get("param_bounds", {}), bpath)
    bounds = []
    for name in sorted(raw_bounds):
        entry = _expect_map(raw_bounds[name], f"{bpath}.{name}")
        _check_fields(entry, {"min", "max"}, {"min", "max"}, f"{bpath}.{name}")
        lo = parse_decimal(entry["min"], f"{bpath}.{name}.min")
        hi = parse_decimal(entry["max"], f"{bpath}.{name}.max")
        if lo > hi:
            raise ValidationError(f"{bpath}.{name}", "min exceeds max")
        bounds.append((name, entry["min"], entry["max"]))
    return AlgorithmConstraint(
        _strings(body["allowed_algorithms"], f"{path}.allowed_algorithms"),
        tuple(bounds),
        _expect_int(body["min_clients"], f"{path}.min_clients", minimum=1),
    )


def policy_from_dict(data: Any) -> PolicyObject:
    data = _expect_map(data, "$")
    for name in sorted(data):
        if name not in _POLICY_FIELDS:
            raise ValidationError(name, "unknown field")
    for name in sorted(_REQUIRED_POLICY_FIELDS):
        if name not in data:
            raise ValidationError(name, "missing field")

    requirement = parse_clause(data["requirement"])
    overrides = [
        p for p, c in iter_clauses(requirement) if isinstance(c, AttestationRequired) and c.subject_override
    ]
    if len(overrides) > 1:
        raise ValidationError(overrides[1], "at most one clause may set subject_override")

    status = data.get("status", "draft")
    if status not in STATUSES:
        raise ValidationError("status", f"unknown status {status!r}")
    tags = _strings(data.get("governance_tags", []), "governance_tags", non_empty=False)
    for i, tag in enumerate(tags):
        if tag not in GOVERNANCE_TAGS:
            raise ValidationError(f"governance_tags[{i}]", f"unknown tag {tag!r}")
    owner = data["owner_key_id"]
    if not isinstance(owner, str) or not _HEX64.match(owner):
        raise ValidationError("owner_key_id", "expected a 64-char lowercase hex key id")

    return PolicyObject(
        policy_id=_expect_str(data["policy_id"], "policy_id", _IDENT),
        version=_expect_int(data["version"], "version", minimum=1),
        asset_id=_expect_str(data["asset_id"], "asset_id", _IDENT),
        owner_key_id=owner,
        operations=_strings(data["operations"], "operations"),
        requirement=requirement,
        capability_ttl_seconds=_expect_int(
            data.get("capability_ttl_seconds", DEFAULT_TTL_SECONDS), "capability_ttl_seconds", minimum=1
        ),
        single_use=_expect_bool(data.get("single_use", False), "single_use"),
        status=status,
        governance_tags=tags,
    )


def parse_policy(document: bytes | str) -> PolicyObject:
    """Parse and fully validate a policy document.

    Raises ParseError for malformed text and ValidationError (with the
    dotted path of the offending field) for invariant breaches.
    """
    data = canonical_decode(document)
    return policy_from_dict(data)


def validate_update(old: PolicyObject, new: PolicyObject) -> None:
    if old.policy_id != new.policy_id:
        raise ValidationError("policy_id", "update must keep the policy id")
    if old.status == "archived":
        raise ArchivedPolicy(f"policy {old.policy_id} is archived")
    if new.owner_key_id != old.owner_key_id:
        raise OwnerMismatch("update must keep the owner")
    if new.asset_id != old.asset_id:
        raise AssetMismatch("update must keep the asset")
    if new.version != old.version + 1:
        raise VersionError(f"expected version {old.version + 1}, got {new.version}")


def policy_digest(policy: PolicyObject) -> str:
    return digest(policy.encode())


def is_ident(value: Any) -> bool:
    return isinstance(value, str) and bool(_IDENT.match(value))
