"""The policy engine: registry of policy objects, evaluation, capability issuance.

Every state change and every evaluation is recorded in the audit log before
the caller gets a result.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from . import crypto
from .audit import AuditEvent, AuditLog
from .capability import CapabilityPackage, issue_capability
from .clock import Clock, SystemClock
from .crypto import KeyPair, canonical_decode, canonical_encode, digest_value
from .errors import (
    ArchivedPolicy,
    BadSignature,
    CapguardError,
    DuplicateVersion,
    OwnerMismatch,
    ParseError,
    SchemaError,
    StorageError,
    UnknownOwner,
    UnknownPolicy,
    ValidationError,
    VerificationError,
    VersionError,
)
from .evidence import (
    DEFAULT_MAX_AGE_SECONDS,
    EvidenceBundle,
    TrustAnchors,
    VerifiedItem,
    compute_spec_body,
    denial_reasons,
    resolve_subject,
    satisfy_clause,
    verify_item,
)
from .policy import PolicyObject, policy_digest, policy_from_dict, validate_update

log = logging.getLogger(__name__)

STATUS_ACTIONS = {"revoke": "revoked", "archive": "archived"}
_STATUS_RANK = {"draft": 0, "registered": 1, "revoked": 2, "archived": 3}


# -- signed requests ---------------------------------------------------------------


def signed_content(request: Mapping[str, Any]) -> bytes:
    """Bytes a request signature covers: the request minus ``signature``."""
    return canonical_encode({k: v for k, v in request.items() if k != "signature"})


def sign_request(request: Dict[str, Any], keypair: KeyPair) -> Dict[str, Any]:
    out = dict(request)
    out["signature"] = crypto.sign(keypair.private_key, signed_content(out)).hex()
    return out


def registration_request(
    document: Mapping[str, Any], owner: KeyPair, trust_anchors: Optional[Mapping[str, Any]] = None
) -> Dict[str, Any]:
    """Owner-signed body for register/update."""
    req: Dict[str, Any] = {"policy": dict(document)}
    if trust_anchors is not None:
        req["trust_anchors"] = dict(trust_anchors)
    return sign_request(req, owner)


def status_request(policy_id: str, action: str, version: int, signer: KeyPair) -> Dict[str, Any]:
    req = {"action": action, "policy_id": policy_id, "version": version, "signer_key_id": signer.key_id}
    return sign_request(req, signer)


def _signature_of(request: Mapping[str, Any]) -> bytes:
    sig = request.get("signature")
    if not isinstance(sig, str) or len(sig) != 128:
        raise BadSignature("request signature missing or malformed")
    try:
        return bytes.fromhex(sig)
    except ValueError:
        raise BadSignature("request signature is not hex") from None


# -- registry ------------------------------------------------------------------------


@dataclass(frozen=True)
class RegisteredPolicy:
    policy: PolicyObject
    anchors: TrustAnchors
    authorization: Dict[str, Any]

    @property
    def digest(self) -> str:
        return policy_digest(self.policy)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy.to_dict(),
            "trust_anchors": self.anchors.to_dict(),
            "authorization": self.authorization,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RegisteredPolicy":
        return cls(
            policy_from_dict(data["policy"]),
            TrustAnchors.from_dict(data["trust_anchors"]),
            dict(data["authorization"]),
        )


class PolicyRegistry:
    """policy_id -> dense list of versions; optionally one file per record.

    Files are named by the digest of the stored policy object, so each
    version and each status change of it is a distinct file.
    """

    def __init__(self, storage_dir: Optional[Path] = None) -> None:
        self.dir = Path(storage_dir) / "policies" if storage_dir is not None else None
        self._versions: Dict[str, List[RegisteredPolicy]] = {}

    def load(self, known_digests: Optional[set] = None) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        best: Dict[Tuple[str, int], RegisteredPolicy] = {}
        for path in sorted(self.dir.glob("*.json")):
            try:
                rec = RegisteredPolicy.from_dict(canonical_decode(path.read_bytes()))
            except (CapguardError, KeyError, TypeError) as exc:
                raise StorageError(f"unreadable registry file {path.name}: {exc}") from None
            if rec.digest != path.stem:
                raise StorageError(f"registry file {path.name} does not match its content digest")
            if known_digests is not None and rec.digest not in known_digests:
                # written but never acknowledged (no audit entry): quarantine
                orphan = self.dir.parent / "orphaned"
                orphan.mkdir(exist_ok=True)
                os.replace(path, orphan / path.name)
                log.warning("registry: quarantined unacknowledged record %s", path.name)
                continue
            key = (rec.policy.policy_id, rec.policy.version)
            cur = best.get(key)
            if cur is None or _STATUS_RANK[rec.policy.status] > _STATUS_RANK[cur.policy.status]:
                best[key] = rec
        self._versions = {}
        for (pid, _), rec in sorted(best.items()):
            self._versions.setdefault(pid, []).append(rec)
        for pid, versions in self._versions.items():
            if [r.policy.version for r in versions] != list(range(1, len(versions) + 1)):
                raise StorageError(f"registry versions of {pid} are not dense from 1")

    def persist(self, rec: RegisteredPolicy) -> None:
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        target = self.dir / f"{rec.digest}.json"
        tmp = target.with_suffix(".tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(canonical_encode(rec.to_dict()))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        except OSError as exc:
            raise StorageError(f"cannot persist policy: {exc}") from None

    def head(self, policy_id: str) -> RegisteredPolicy:
        versions = self._versions.get(policy_id)
        if not versions:
            raise UnknownPolicy(f"no policy {policy_id!r}")
        return versions[-1]

    def versions(self, policy_id: str) -> List[RegisteredPolicy]:
        return list(self._versions.get(policy_id, []))

    def put(self, rec: RegisteredPolicy) -> None:
        """Record a new head, or replace the head's status."""
        versions = self._versions.setdefault(rec.policy.policy_id, [])
        if versions and versions[-1].policy.version == rec.policy.version:
            versions[-1] = rec
        else:
            versions.append(rec)

    def policy_ids(self) -> List[str]:
        return sorted(self._versions)


# -- evaluation types ------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluationRequest:
    policy_id: str
    operation: str
    evidence_bundle: EvidenceBundle

    @classmethod
    def from_dict(cls, policy_id: str, data: Any) -> "EvaluationRequest":
        if not isinstance(data, dict):
            raise SchemaError("evaluation request must be a map")
        if "policy_id" in data and data["policy_id"] != policy_id:
            raise SchemaError("policy_id in body differs from the path")
        op = data.get("operation")
        if not isinstance(op, str) or not op:
            raise SchemaError("operation must be a non-empty string")
        return cls(policy_id, op, EvidenceBundle.from_dict(data.get("evidence_bundle")))


@dataclass(frozen=True)
class EvaluationResponse:
    granted: bool
    capability: Optional[CapabilityPackage] = None
    reasons: Tuple[Dict[str, str], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        if self.granted:
            assert self.capability is not None
            return {"outcome": "granted", "capability": self.capability.to_dict()}
        return {"outcome": "denied", "reasons": list(self.reasons)}


def _reason(path: str, code: str, reason: str, clause_type: str = "") -> Dict[str, str]:
    return {"clause_path": path, "clause_type": clause_type, "code": code, "reason": reason}


# -- engine ------------------------------------------------------------------------------


class PolicyEngine:
    def __init__(
        self,
        keypair: KeyPair,
        owner_keys: Mapping[str, bytes],
        storage_dir: Optional[os.PathLike] = None,
        clock: Optional[Clock] = None,
        max_evidence_age_seconds: int = DEFAULT_MAX_AGE_SECONDS,
    ) -> None:
        if not keypair.has_private:
            raise ValueError("engine needs a private key")
        self.keypair = keypair
        self.owner_keys = dict(owner_keys)
        self.clock = clock or SystemClock()
        self.max_evidence_age_seconds = max_evidence_age_seconds
        self.storage_dir = Path(storage_dir) if storage_dir is not None else None
        self._lock = threading.RLock()
        self.audit = AuditLog(self.storage_dir / "audit.log" if self.storage_dir else None, self.clock)
        self.registry = PolicyRegistry(self.storage_dir)
        if self.storage_dir is not None:
            acknowledged = {
                e.details.get("policy_digest")
                for e in self.audit.entries()
                if e.event_type.startswith("policy_")
            }
            self.registry.load(acknowledged)

    @property
    def key_id(self) -> str:
        return self.keypair.key_id

    # -- lifecycle ----------------------------------------------------------

    def _parse_registration(self, request: Any) -> Tuple[PolicyObject, TrustAnchors, bytes]:
        if not isinstance(request, dict) or not {"policy", "signature"} <= set(request) <= {
            "policy",
            "trust_anchors",
            "signature",
        }:
            raise SchemaError("registration must carry policy, signature and optional trust_anchors")
        policy = policy_from_dict(request["policy"])
        if "trust_anchors" in request:
            anchors = TrustAnchors.from_dict(request["trust_anchors"])
        else:
            anchors = TrustAnchors.from_policy(policy)
        return policy, anchors, _signature_of(request)

    def _check_owner_signature(self, owner_key_id: str, request: Mapping[str, Any], sig: bytes) -> None:
        public = self.owner_keys.get(owner_key_id)
        if public is None:
            raise UnknownOwner(f"owner {owner_key_id[:16]}... is not anchored at this engine")
        if not crypto.verify(public, signed_content(request), sig):
            raise BadSignature("owner signature does not verify")

    def register_policy(self, request: Mapping[str, Any]) -> Dict[str, Any]:
        policy, anchors, sig = self._parse_registration(request)
        self._check_owner_signature(policy.owner_key_id, request, sig)
        with self._lock:
            if self.registry.versions(policy.policy_id):
                raise DuplicateVersion(f"policy {policy.policy_id!r} is already registered; use update")
            if policy.version != 1:
                raise ValidationError("version", "first registration must be version 1")
            rec = RegisteredPolicy(policy.with_status("registered"), anchors, {"request_digest": digest_value(dict(request))})
            self._commit(rec, "policy_registered", policy.owner_key_id)
        return {"policy_id": policy.policy_id, "version": policy.version, "status": "registered"}

    def update_policy(self, policy_id: str, request: Mapping[str, Any]) -> Dict[str, Any]:
        policy, anchors, sig = self._parse_registration(request)
        if policy.policy_id != policy_id:
            raise ValidationError("policy_id", "document policy_id differs from the target")
        with self._lock:
            head = self.registry.head(policy_id)
            validate_update(head.policy, policy)
            self._check_owner_signature(head.policy.owner_key_id, request, sig)
            rec = RegisteredPolicy(policy.with_status("registered"), anchors, {"request_digest": digest_value(dict(request))})
            self._commit(rec, "policy_updated", policy.owner_key_id)
        return {"policy_id": policy_id, "version": policy.version, "status": "registered"}

    def _change_status(self, policy_id: str, request: Mapping[str, Any], action: str) -> Dict[str, Any]:
        if not isinstance(request, dict) or set(request) != {"action", "policy_id", "version", "signer_key_id", "signature"}:
            raise SchemaError("status request must carry action, policy_id, version, signer_key_id, signature")
        if request["action"] != action or request["policy_id"] != policy_id:
            raise SchemaError(f"status request is not a {action} of {policy_id!r}")
        sig = _signature_of(request)
        with self._lock:
            head = self.registry.head(policy_id)
            if head.policy.status == "archived":
                raise ArchivedPolicy(f"policy {policy_id} is archived")
            if request["signer_key_id"] != head.policy.owner_key_id:
                raise OwnerMismatch("only the registered owner may change policy status")
            self._check_owner_signature(head.policy.owner_key_id, request, sig)
            if request["version"] != head.policy.version:
                raise VersionError(f"head is version {head.policy.version}")
            status = STATUS_ACTIONS[action]
            rec = RegisteredPolicy(head.policy.with_status(status), head.anchors, {"request_digest": digest_value(dict(request))})
            self._commit(rec, f"policy_{status}", head.policy.owner_key_id)
        return {"policy_id": policy_id, "version": head.policy.version, "status": status}

    def revoke_policy(self, policy_id: str, request: Mapping[str, Any]) -> Dict[str, Any]:
        return self._change_status(policy_id, request, "revoke")

    def archive_policy(self, policy_id: str, request: Mapping[str, Any]) -> Dict[str, Any]:
        return self._change_status(policy_id, request, "archive")

    def _commit(self, rec: RegisteredPolicy, event_type: str, actor: str) -> None:
        self.registry.persist(rec)
        self.audit.append(
            AuditEvent(
                event_type,
                actor,
                rec.policy.policy_id,
                rec.policy.version,
                {"asset_id": rec.policy.asset_id, "policy_digest": rec.digest, "status": rec.policy.status},
            )
        )
        self.registry.put(rec)

    def get_policy(self, policy_id: str) -> Dict[str, Any]:
        with self._lock:
            head = self.registry.head(policy_id)
            versions = [r.policy.version for r in self.registry.versions(policy_id)]
        return {
            "policy": head.policy.to_dict(),
            "trust_anchors": head.anchors.to_dict(),
            "policy_digest": head.digest,
            "versions": versions,
        }

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, request: EvaluationRequest, clock: Optional[Clock] = None) -> EvaluationResponse:
        clock = clock or self.clock
        with self._lock:
            head = self.registry.head(request.policy_id)
        policy = head.policy
        response = self._decide(head, request, clock)
        bundle = request.evidence_bundle
        base = {
            "asset_id": policy.asset_id,
            "operation": request.operation,
            "evidence_bundle_digest": bundle.digest(),
            "policy_digest": head.digest,
        }
        actor = bundle.submitted_by_key_id
        if response.granted:
            cap = response.capability
            assert cap is not None
            granted = dict(base, cap_id=cap.cap_id, subject_kind=cap.subject_kind, subject_key_id=cap.subject_key_id)
            issued = {
                "asset_id": cap.asset_id,
                "cap_id": cap.cap_id,
                "capability_digest": digest_value(cap.to_dict()),
                "expires_at": cap.expires_at,
                "single_use": cap.single_use,
            }
            self.audit.append_many(
                [
                    AuditEvent("evaluation_granted", actor, policy.policy_id, policy.version, granted),
                    AuditEvent("capability_issued", self.key_id, policy.policy_id, policy.version, issued),
                ]
            )
        else:
            details = dict(base, reasons=[dict(r) for r in response.reasons])
            self.audit.append(AuditEvent("evaluation_denied", actor, policy.policy_id, policy.version, details))
        return response

    def _decide(self, head: RegisteredPolicy, request: EvaluationRequest, clock: Clock) -> EvaluationResponse:
        policy = head.policy
        if policy.status != "registered":
            return EvaluationResponse(False, reasons=(_reason("policy", "PolicyNotActive", f"policy is {policy.status}"),))
        if request.operation not in policy.operations:
            return EvaluationResponse(
                False,
                reasons=(_reason("operations", "OperationNotCovered", f"{request.operation!r} not in {list(policy.operations)}"),),
            )
        now = clock.now()
        verified: List[VerifiedItem] = []
        item_reasons = []
        for i, item in enumerate(request.evidence_bundle.items):
            try:
                verified.append(verify_item(item, head.anchors, now, self.max_evidence_age_seconds, index=i))
            except CapguardError as exc:
                item_reasons.append(_reason(f"evidence[{i}]", exc.code, f"{item.evidence_type}: {exc.message}"))
        ctx = {"asset_id": policy.asset_id, "operation": request.operation}
        result = satisfy_clause(policy.requirement, verified, ctx)
        if not result.satisfied:
            return EvaluationResponse(False, reasons=tuple(denial_reasons(result) + item_reasons))
        try:
            subject = resolve_subject([result], policy)
        except VerificationError as exc:
            return EvaluationResponse(False, reasons=(_reason("requirement", exc.code, exc.message),))
        constraints: Dict[str, Any] = {}
        if request.operation.startswith("execute:"):
            specs = [v for v in subject.consumed if v.evidence_type == "compute_spec"]
            if specs:
                constraints["compute_spec_digest"] = digest_value(compute_spec_body(specs[0].payload))
        cap = issue_capability(policy, subject, request.operation, constraints, self.keypair, clock)
        return EvaluationResponse(True, capability=cap)
