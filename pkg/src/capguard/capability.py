"""Capability packages: the engine-signed tokens guardians act on.

The body is every field except ``signature``. ``cap_id`` is the digest of
the body without ``cap_id``; the engine signature covers the body with it.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Mapping, Optional

from . import crypto
from .clock import Clock
from .crypto import KeyPair, canonical_encode, digest
from .errors import (
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
from .evidence import CLOCK_SKEW_SECONDS, Subject
from .policy import PolicyObject, policy_digest

BODY_FIELDS = (
    "cap_id",
    "policy_id",
    "policy_version",
    "policy_digest",
    "asset_id",
    "operation",
    "subject_kind",
    "subject_key_id",
    "constraints",
    "issued_at",
    "expires_at",
    "nonce",
    "single_use",
    "engine_key_id",
)

_HEX = re.compile(r"^[0-9a-f]*$")


@dataclass(frozen=True)
class CapabilityPackage:
    cap_id: str
    policy_id: str
    policy_version: int
    policy_digest: str
    asset_id: str
    operation: str
    subject_kind: str
    subject_key_id: str
    constraints: Dict[str, Any]
    issued_at: int
    expires_at: int
    nonce: str
    single_use: bool
    engine_key_id: str
    signature: bytes = field(default=b"", repr=False)

    def body(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in BODY_FIELDS}

    def core(self) -> Dict[str, Any]:
        body = self.body()
        del body["cap_id"]
        return body

    def to_dict(self) -> Dict[str, Any]:
        out = self.body()
        out["signature"] = self.signature.hex()
        return out

    def encode(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_dict(cls, data: Any) -> "CapabilityPackage":
        if not isinstance(data, dict) or set(data) != set(BODY_FIELDS) | {"signature"}:
            raise ParseError("capability must carry exactly the body fields plus signature")
        sig = data["signature"]
        if not isinstance(sig, str) or not _HEX.match(sig) or len(sig) != 128:
            raise ParseError("capability signature must be 128 hex chars")
        types = {
            "policy_version": int,
            "issued_at": int,
            "expires_at": int,
            "single_use": bool,
            "constraints": dict,
        }
        for name in BODY_FIELDS:
            want = types.get(name, str)
            value = data[name]
            if not isinstance(value, want) or (want is int and isinstance(value, bool)):
                raise ParseError(f"capability field {name} must be {want.__name__}")
        return cls(signature=bytes.fromhex(sig), **{n: data[n] for n in BODY_FIELDS})


def compute_cap_id(pkg: CapabilityPackage) -> str:
    return digest(canonical_encode(pkg.core()))


def sign_capability(pkg: CapabilityPackage, engine: KeyPair) -> CapabilityPackage:
    """Fix up ``cap_id`` and ``engine_key_id`` and sign."""
    pkg = replace(pkg, engine_key_id=engine.key_id)
    pkg = replace(pkg, cap_id=compute_cap_id(pkg))
    sig = crypto.sign(engine.private_key, canonical_encode(pkg.body()))
    return replace(pkg, signature=sig)


def issue_capability(
    policy: PolicyObject,
    subject: Subject,
    operation: str,
    constraints: Optional[Mapping[str, Any]],
    engine_keypair: KeyPair,
    clock: Clock,
) -> CapabilityPackage:
    if policy.status != "registered":
        raise PolicyNotActive(f"policy {policy.policy_id} is {policy.status}")
    if operation not in policy.operations:
        raise OperationNotCovered(f"operation {operation!r} not in {list(policy.operations)}")
    now = clock.now()
    pkg = CapabilityPackage(
        cap_id="",
        policy_id=policy.policy_id,
        policy_version=policy.version,
        policy_digest=policy_digest(policy),
        asset_id=policy.asset_id,
        operation=operation,
        subject_kind=subject.kind,
        subject_key_id=subject.key_id,
        constraints=dict(constraints or {}),
        issued_at=now,
        expires_at=now + policy.capability_ttl_seconds,
        nonce=os.urandom(16).hex(),
        single_use=policy.single_use,
        engine_key_id=engine_keypair.key_id,
    )
    return sign_capability(pkg, engine_keypair)


def verify_capability(
    pkg: CapabilityPackage,
    trusted_engine_keys: Mapping[str, bytes],
    expected: Mapping[str, str],
    clock: Clock,
    skew: int = CLOCK_SKEW_SECONDS,
) -> None:
    """Raise unless ``pkg`` is a valid, current capability for ``expected``.

    ``expected`` holds ``asset_id`` and ``operation`` and optionally
    ``policy_id``. Expiry is inclusive: a package is valid at exactly
    ``expires_at``.
    """
    public = trusted_engine_keys.get(pkg.engine_key_id)
    if public is None:
        raise UntrustedIssuer(f"engine {pkg.engine_key_id[:16]}... is not trusted")
    if not crypto.verify(public, canonical_encode(pkg.body()), pkg.signature):
        raise BadSignature("capability signature does not verify")
    if compute_cap_id(pkg) != pkg.cap_id:
        raise CapIdMismatch("cap_id does not match the capability body")
    if pkg.asset_id != expected["asset_id"]:
        raise AssetMismatch(f"capability is for asset {pkg.asset_id!r}")
    if pkg.operation != expected["operation"]:
        raise OperationMismatch(f"capability is for operation {pkg.operation!r}")
    if expected.get("policy_id") is not None and pkg.policy_id != expected["policy_id"]:
        raise PolicyMismatch(f"capability was issued by policy {pkg.policy_id!r}")
    if pkg.expires_at <= pkg.issued_at:
        raise Expired("capability has a non-positive lifetime")
    now = clock.now()
    if now < pkg.issued_at - skew:
        raise NotYetValid(f"capability valid from {pkg.issued_at}")
    if now > pkg.expires_at:
        raise Expired(f"capability expired at {pkg.expires_at}")


def parse_capability(document: bytes | str) -> CapabilityPackage:
    data = crypto.canonical_decode(document)
    if isinstance(data, dict) and set(data) == {"capability"}:
        data = data["capability"]
    return CapabilityPackage.from_dict(data)
