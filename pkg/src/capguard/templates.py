"""Starter policy documents mirroring the dataset-download and FL-study use cases."""

from __future__ import annotations

from typing import Any, Dict, Mapping, Optional, Sequence

PLACEHOLDER = "<key-id>"

TEMPLATES = ("signed-download", "paid-download", "tee-download", "fedavg-study")


def _keys(ids: Optional[Sequence[str]]) -> list:
    return list(ids) if ids else [PLACEHOLDER]


def signature_clause(designees: Sequence[str], threshold: int) -> Dict[str, Any]:
    return {"type": "signature_required", "designee_key_ids": _keys(designees), "threshold": threshold}


def payment_clause(services: Sequence[str], min_amount_minor: int, currency: str) -> Dict[str, Any]:
    return {
        "type": "payment_required",
        "service_key_ids": _keys(services),
        "min_amount_minor": min_amount_minor,
        "currency": currency,
    }


def attestation_clause(
    attesters: Sequence[str],
    code_measurements: Sequence[str] = (),
    max_ingress_ports: int = 0,
    subject_override: bool = True,
) -> Dict[str, Any]:
    return {
        "type": "attestation_required",
        "attester_key_ids": _keys(attesters),
        "required_claims": {
            "ssh_disabled": True,
            "max_ingress_ports": max_ingress_ports,
            "allowed_code_measurements": list(code_measurements),
        },
        "subject_override": subject_override,
    }


def approval_clause(approvers: Sequence[str], scope: str) -> Dict[str, Any]:
    return {"type": "approval_required", "approver_key_ids": _keys(approvers), "scope": scope}


def algorithm_clause(
    allowed: Sequence[str], param_bounds: Optional[Mapping[str, Mapping[str, str]]] = None, min_clients: int = 2
) -> Dict[str, Any]:
    return {
        "type": "algorithm_constraint",
        "allowed_algorithms": list(allowed),
        "param_bounds": {k: dict(v) for k, v in (param_bounds or {}).items()},
        "min_clients": min_clients,
    }


def render(
    template: str,
    policy_id: str = "dataset-policy",
    asset_id: str = "dataset",
    owner_key_id: str = PLACEHOLDER,
    designees: Sequence[str] = (),
    threshold: int = 2,
    payment_services: Sequence[str] = (),
    min_amount_minor: int = 10000,
    currency: str = "USD",
    attesters: Sequence[str] = (),
    code_measurements: Sequence[str] = (),
    approvers: Sequence[str] = (),
    scope: str = "non-commercial-research",
    param_bounds: Optional[Mapping[str, Mapping[str, str]]] = None,
    min_clients: int = 2,
    ttl_seconds: int = 3600,
    single_use: bool = False,
) -> Dict[str, Any]:
    """A policy document for ``template``; unknown key ids are left as placeholders."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {', '.join(TEMPLATES)}")
    tags = ["accountability_oversight", "transparency_monitoring"]
    operations = ["download"]
    if template == "signed-download":
        requirement = signature_clause(designees, threshold)
    elif template == "paid-download":
        requirement = {
            "type": "all_of",
            "children": [signature_clause(designees, threshold), payment_clause(payment_services, min_amount_minor, currency)],
        }
    elif template == "tee-download":
        requirement = {
            "type": "all_of",
            "children": [
                signature_clause(designees, threshold),
                payment_clause(payment_services, min_amount_minor, currency),
                attestation_clause(attesters, code_measurements),
            ],
        }
        tags.append("protection_integrity")
    else:
        operations = ["execute:fedavg"]
        bounds = param_bounds if param_bounds is not None else {"local_epochs": {"min": "1", "max": "20"}}
        requirement = {
            "type": "all_of",
            "children": [
                approval_clause(approvers, scope),
                algorithm_clause(["fedavg"], bounds, min_clients),
                attestation_clause(attesters, code_measurements),
            ],
        }
        tags.append("protection_integrity")
    return {
        "policy_id": policy_id,
        "version": 1,
        "asset_id": asset_id,
        "owner_key_id": owner_key_id,
        "operations": operations,
        "requirement": requirement,
        "capability_ttl_seconds": ttl_seconds,
        "single_use": single_use,
        "status": "draft",
        "governance_tags": sorted(tags),
    }
