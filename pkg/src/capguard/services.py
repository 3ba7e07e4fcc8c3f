"""HTTP front ends for the engine, asset guardian and operation guardian.

Bodies are canonical JSON both ways. Errors are
``{"error_code", "message", "details"}`` with a 4xx/5xx status.
"""

from __future__ import annotations

import contextlib
import logging
import os
import signal
import socket
import threading
from typing import Any, Awaitable, Callable, Dict, Optional

from fastapi import FastAPI, Request
from fastapi.responses import Response
from starlette.concurrency import run_in_threadpool

from . import crypto
from .audit import AuditQuery
from .capability import CapabilityPackage
from .clock import Clock
from .config import ServiceConfig, load_config
from .crypto import canonical_decode, canonical_encode
from .engine import EvaluationRequest, PolicyEngine
from .errors import BindError, CapguardError, ConfigError, ParseError, SchemaError
from .guardian import AssetGuardian, ComputeSpec, OperationGuardian

log = logging.getLogger(__name__)


class CanonicalJSONResponse(Response):
    media_type = "application/json"

    def render(self, content: Any) -> bytes:
        return canonical_encode(content)


def _install_error_handlers(app: FastAPI) -> None:
    @app.exception_handler(CapguardError)
    async def _capguard_error(request: Request, exc: CapguardError) -> Response:
        return CanonicalJSONResponse(exc.to_wire(), status_code=exc.http_status)

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception) -> Response:
        log.exception("unhandled error")
        body = {"error_code": "InternalError", "message": str(exc), "details": {}}
        return CanonicalJSONResponse(body, status_code=500)


async def _body(request: Request) -> Any:
    raw = await request.body()
    try:
        return canonical_decode(raw)
    except ParseError as exc:
        raise ParseError(f"request body: {exc.message}") from None


def _capability(data: Any) -> CapabilityPackage:
    try:
        return CapabilityPackage.from_dict(data)
    except ParseError as exc:
        raise SchemaError(f"capability: {exc.message}") from None


def engine_app(engine: PolicyEngine) -> FastAPI:
    app = FastAPI(title="capguard policy engine")
    _install_error_handlers(app)

    async def call(fn: Callable, *args: Any) -> Response:
        return CanonicalJSONResponse(await run_in_threadpool(fn, *args))

    @app.get("/v1/health")
    async def health() -> Response:
        return CanonicalJSONResponse({"status": "ok", "engine_key_id": engine.key_id, "pid": os.getpid()})

    @app.post("/v1/policies")
    async def register(request: Request) -> Response:
        return await call(engine.register_policy, await _body(request))

    @app.put("/v1/policies/{policy_id}")
    async def update(policy_id: str, request: Request) -> Response:
        return await call(engine.update_policy, policy_id, await _body(request))

    @app.post("/v1/policies/{policy_id}/revoke")
    async def revoke(policy_id: str, request: Request) -> Response:
        return await call(engine.revoke_policy, policy_id, await _body(request))

    @app.post("/v1/policies/{policy_id}/archive")
    async def archive(policy_id: str, request: Request) -> Response:
        return await call(engine.archive_policy, policy_id, await _body(request))

    @app.get("/v1/policies/{policy_id}")
    async def show(policy_id: str) -> Response:
        return await call(engine.get_policy, policy_id)

    @app.post("/v1/policies/{policy_id}/evaluate")
    async def evaluate(policy_id: str, request: Request) -> Response:
        body = await _body(request)

        def run() -> Dict[str, Any]:
            engine.registry.head(policy_id)  # UnknownPolicy is a transport-level error
            try:
                req = EvaluationRequest.from_dict(policy_id, body)
            except CapguardError as exc:
                return {
                    "outcome": "denied",
                    "reasons": [{"clause_path": "evidence_bundle", "clause_type": "", "code": exc.code, "reason": exc.message}],
                }
            return engine.evaluate(req).to_dict()

        return await call(run)

    @app.get("/v1/audit/head")
    async def audit_head() -> Response:
        return CanonicalJSONResponse(engine.audit.head())

    @app.get("/v1/audit/entries")
    async def audit_entries(
        since_index: Optional[int] = None,
        policy_id: Optional[str] = None,
        asset_id: Optional[str] = None,
        actor_key_id: Optional[str] = None,
        event_type: Optional[str] = None,
        format: str = "json",
    ) -> Response:
        if format == "ndjson":
            raw = await run_in_threadpool(engine.audit.raw)
            return Response(raw, media_type="application/x-ndjson")
        flt = AuditQuery(policy_id, asset_id, actor_key_id, event_type, since_index)
        entries = await run_in_threadpool(engine.audit.query, flt)
        return CanonicalJSONResponse({"entries": [e.to_dict() for e in entries]})

    return app


def guardian_app(guardian: AssetGuardian) -> FastAPI:
    app = FastAPI(title="capguard asset guardian")
    _install_error_handlers(app)

    @app.get("/v1/health")
    async def health() -> Response:
        return CanonicalJSONResponse(
            {
                "status": "ok",
                "guardian_key_id": guardian.keypair.key_id if guardian.keypair else "",
                "config_digest": guardian.config_digest,
                "pid": os.getpid(),
            }
        )

    @app.get("/v1/assets")
    async def catalog() -> Response:
        return CanonicalJSONResponse({"assets": guardian.catalog()})

    @app.post("/v1/assets/{asset_id}/download")
    async def download(asset_id: str, request: Request) -> Response:
        body = await _body(request)
        if not isinstance(body, dict) or "capability" not in body:
            raise SchemaError("body must carry a capability")
        cap = _capability(body["capability"])
        operation = body.get("operation", "download")
        if not isinstance(operation, str):
            raise SchemaError("operation must be a string")
        sealed = await run_in_threadpool(guardian.download, asset_id, cap, None, operation)
        return CanonicalJSONResponse({"sealed": sealed.to_dict()})

    return app


def opguard_app(opguard: OperationGuardian) -> FastAPI:
    app = FastAPI(title="capguard operation guardian")
    _install_error_handlers(app)

    @app.get("/v1/health")
    async def health() -> Response:
        return CanonicalJSONResponse(
            {
                "status": "ok",
                "guardian_key_id": opguard.keypair.key_id,
                "config_digest": opguard.config_digest,
                "pid": os.getpid(),
            }
        )

    @app.post("/v1/ops/fedavg")
    async def run_fedavg(request: Request) -> Response:
        body = await _body(request)
        if not isinstance(body, dict) or set(body) != {"capabilities", "spec"}:
            raise SchemaError("body must carry exactly capabilities and spec")
        if not isinstance(body["capabilities"], list):
            raise SchemaError("capabilities must be a list")
        caps = [_capability(c) for c in body["capabilities"]]
        spec = ComputeSpec.from_dict(body["spec"])
        result = await run_in_threadpool(opguard.execute_fedavg, caps, spec)
        return CanonicalJSONResponse(result)

    return app


# -- launching from config ------------------------------------------------------------


def build_engine(cfg: ServiceConfig, clock: Optional[Clock] = None) -> PolicyEngine:
    owners = {}
    for k in cfg.key_ids("owner_key_ids"):
        try:
            owners[k] = crypto.public_key_from_id(k)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    age = cfg.raw.get("max_evidence_age_seconds", 86400)
    return PolicyEngine(cfg.keypair, owners, cfg.path_field("storage_dir"), clock, age)


def build_guardian(cfg: ServiceConfig, clock: Optional[Clock] = None) -> AssetGuardian:
    return AssetGuardian(
        cfg.keypair, cfg.path_field("store_dir"), cfg.key_ids("trusted_engine_key_ids"), clock, cfg.digest
    )


def build_opguard(cfg: ServiceConfig, clock: Optional[Clock] = None) -> OperationGuardian:
    from .client import HttpSource

    urls = cfg.raw["asset_guardians"]
    if not isinstance(urls, dict):
        raise ConfigError("asset_guardians must map asset_id -> guardian URL")
    sources = {asset: HttpSource(url) for asset, url in urls.items()}
    return OperationGuardian(cfg.keypair, cfg.key_ids("trusted_engine_key_ids"), sources, clock, cfg.digest)


def build_app(kind: str, cfg: ServiceConfig, clock: Optional[Clock] = None) -> FastAPI:
    if kind == "engine":
        return engine_app(build_engine(cfg, clock))
    if kind == "guardian":
        return guardian_app(build_guardian(cfg, clock))
    if kind == "opguard":
        return opguard_app(build_opguard(cfg, clock))
    raise ConfigError(f"unknown service kind {kind!r}")


def bind_socket(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET, socket.SOCK_STREAM)
    # allows a restart while old connections sit in TIME_WAIT; a live listener still conflicts
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindError(f"cannot bind {host}:{port}: {exc.strerror or exc}") from None
    sock.listen(128)
    sock.set_inheritable(True)
    return sock


def _server_class():
    import uvicorn

    class Server(uvicorn.Server):
        """Drains on SIGTERM/SIGINT and then returns normally instead of
        re-raising the signal, so a requested stop exits with status 0."""

        @contextlib.contextmanager
        def capture_signals(self):
            if threading.current_thread() is not threading.main_thread():
                yield
                return
            previous = {sig: signal.signal(sig, self.handle_exit) for sig in (signal.SIGINT, signal.SIGTERM)}
            try:
                yield
            finally:
                for sig, handler in previous.items():
                    signal.signal(sig, handler)

    return Server


def serve(kind: str, config_path: os.PathLike) -> None:
    """Run a service until SIGTERM/SIGINT. Audit appends are already durable,
    so shutdown only has to drain in-flight requests."""
    import uvicorn

    cfg = load_config(kind, config_path)
    app = build_app(kind, cfg)
    sock = bind_socket(*cfg.listen)
    server = _server_class()(uvicorn.Config(app, log_level="warning", lifespan="off"))
    log.info("%s listening on %s:%d", kind, *cfg.listen)
    try:
        server.run(sockets=[sock])
    finally:
        sock.close()
    log.info("%s stopped", kind)
