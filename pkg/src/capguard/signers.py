"""Mock evidence sources: designees, payment service, attestation service,
approver, and the user's self-signed compute spec."""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

from .crypto import KeyPair, digest
from .evidence import EvidenceItem, make_item


def designee_signature(designee: KeyPair, asset_id: str, operation: str, subject_key_id: str, issued_at: int) -> EvidenceItem:
    return make_item(
        "designee_signature",
        designee,
        {"asset_id": asset_id, "operation": operation, "subject_key_id": subject_key_id, "issued_at": issued_at},
    )


def payment_receipt(
    service: KeyPair,
    payer_subject_key_id: str,
    amount_minor: int,
    currency: str,
    asset_id: str,
    receipt_id: str,
    issued_at: int,
) -> EvidenceItem:
    return make_item(
        "payment_receipt",
        service,
        {
            "payer_subject_key_id": payer_subject_key_id,
            "amount_minor": amount_minor,
            "currency": currency,
            "asset_id": asset_id,
            "receipt_id": receipt_id,
            "issued_at": issued_at,
        },
    )


def attestation_token(
    attester: KeyPair,
    tee_subject_key_id: str,
    issued_at: int,
    ssh_disabled: bool = True,
    ingress_ports: Sequence[int] = (),
    code_measurement: str = "",
) -> EvidenceItem:
    return make_item(
        "attestation_token",
        attester,
        {
            "tee_subject_key_id": tee_subject_key_id,
            "claims": {
                "ssh_disabled": ssh_disabled,
                "ingress_ports": list(ingress_ports),
                "code_measurement": code_measurement or digest(b""),
            },
            "issued_at": issued_at,
        },
    )


def approval(approver: KeyPair, subject_key_id: str, scope: str, document: bytes, issued_at: int) -> EvidenceItem:
    """Third-party sign-off over a document (e.g. a research proposal PDF)."""
    return make_item(
        "approval",
        approver,
        {"subject_key_id": subject_key_id, "scope": scope, "document_digest": digest(document), "issued_at": issued_at},
    )


def compute_spec(
    user: KeyPair,
    algorithm: str,
    params: Mapping[str, str],
    dataset_ids: Sequence[str],
    issued_at: int,
    client_count: Optional[int] = None,
) -> EvidenceItem:
    return make_item(
        "compute_spec",
        user,
        {
            "subject_key_id": user.key_id,
            "algorithm": algorithm,
            "params": dict(params),
            "client_count": len(dataset_ids) if client_count is None else client_count,
            "dataset_ids": list(dataset_ids),
            "issued_at": issued_at,
        },
    )


def spec_of(item: EvidenceItem) -> Dict[str, object]:
    """The executable compute spec carried by a compute_spec item."""
    p = item.payload
    return {
        "algorithm": p["algorithm"],
        "params": dict(p["params"]),
        "client_count": p["client_count"],
        "dataset_ids": list(p["dataset_ids"]),
    }
