"""HTTP clients for the services; errors come back as the matching exceptions."""

from __future__ import annotations

from typing import Any, Dict, List, Optional, Sequence, Union

import httpx

from .capability import CapabilityPackage
from .crypto import SealedPayload, canonical_decode, canonical_encode
from .errors import CapguardError, ValidationError, error_class

HttpLike = Union[str, httpx.Client]


class ServiceError(CapguardError):
    """An error response whose code this client does not know."""


def _raise_for(resp: httpx.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        body = canonical_decode(resp.content)
        code, message = body["error_code"], body.get("message", "")
        details = body.get("details", {})
    except Exception:
        raise ServiceError(f"HTTP {resp.status_code}: {resp.text[:200]}") from None
    cls = error_class(code)
    if cls is None:
        err = ServiceError(f"{code}: {message}", **details)
    else:
        err = cls.__new__(cls)
        CapguardError.__init__(err, message, **details)
        if isinstance(err, ValidationError):
            err.path = details.get("path", "")
    err.http_status = resp.status_code
    raise err


class _Client:
    def __init__(self, base: HttpLike, timeout: float = 30.0) -> None:
        self.http = base if isinstance(base, httpx.Client) else httpx.Client(base_url=base, timeout=timeout)

    def _get(self, path: str, **params: Any) -> Any:
        resp = self.http.get(path, params={k: v for k, v in params.items() if v is not None})
        _raise_for(resp)
        return canonical_decode(resp.content)

    def _send(self, method: str, path: str, body: Any) -> Any:
        resp = self.http.request(
            method, path, content=canonical_encode(body), headers={"content-type": "application/json"}
        )
        _raise_for(resp)
        return canonical_decode(resp.content)

    def health(self) -> Dict[str, Any]:
        return self._get("/v1/health")

    def close(self) -> None:
        self.http.close()


class EngineClient(_Client):
    def register(self, request: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("POST", "/v1/policies", request)

    def update(self, policy_id: str, request: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("PUT", f"/v1/policies/{policy_id}", request)

    def revoke(self, policy_id: str, request: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("POST", f"/v1/policies/{policy_id}/revoke", request)

    def archive(self, policy_id: str, request: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("POST", f"/v1/policies/{policy_id}/archive", request)

    def show(self, policy_id: str) -> Dict[str, Any]:
        return self._get(f"/v1/policies/{policy_id}")

    def evaluate(self, policy_id: str, operation: str, bundle: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("POST", f"/v1/policies/{policy_id}/evaluate", {"operation": operation, "evidence_bundle": bundle})

    def audit_head(self) -> Dict[str, Any]:
        return self._get("/v1/audit/head")

    def audit_entries(self, **filters: Any) -> List[Dict[str, Any]]:
        return self._get("/v1/audit/entries", **filters)["entries"]

    def audit_raw(self) -> bytes:
        resp = self.http.get("/v1/audit/entries", params={"format": "ndjson"})
        _raise_for(resp)
        return resp.content


class GuardianClient(_Client):
    def catalog(self) -> List[Dict[str, Any]]:
        return self._get("/v1/assets")["assets"]

    def download(self, asset_id: str, capability: CapabilityPackage, operation: Optional[str] = None) -> SealedPayload:
        body: Dict[str, Any] = {"capability": capability.to_dict()}
        if operation is not None and operation != "download":
            body["operation"] = operation
        return SealedPayload.from_dict(self._send("POST", f"/v1/assets/{asset_id}/download", body)["sealed"])


class OpGuardClient(_Client):
    def fedavg(self, capabilities: Sequence[CapabilityPackage], spec: Dict[str, Any]) -> Dict[str, Any]:
        return self._send("POST", "/v1/ops/fedavg", {"capabilities": [c.to_dict() for c in capabilities], "spec": spec})


class HttpSource:
    """Asset source for the operation guardian backed by a remote asset guardian."""

    def __init__(self, base: HttpLike) -> None:
        self.client = GuardianClient(base)

    def fetch(self, asset_id: str, capability: CapabilityPackage, operation: str) -> SealedPayload:
        return self.client.download(asset_id, capability, operation)
