"""``capguard`` command line: policy manager, operations manager, auditing
manager, mock evidence signers and service launchers.

Exit codes: 0 success, 2 policy denial, 3 verification failure,
4 transport error, 1 anything else.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import httpx

from . import crypto, signers, templates
from .audit import verify_chain
from .capability import CapabilityPackage, parse_capability
from .client import EngineClient, GuardianClient, OpGuardClient
from .config import ENV_VAR, load_keypair, save_keypair
from .crypto import KeyPair, canonical_decode, canonical_encode, digest
from .engine import registration_request, status_request
from .errors import CapguardError, ConfigError, SchemaError
from .evidence import EvidenceBundle, EvidenceItem
from .guardian import make_asset, write_asset
from .policy import policy_from_dict

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_DENIED = 2
EXIT_VERIFICATION = 3
EXIT_TRANSPORT = 4

_KEY_ID = re.compile(r"^[0-9a-f]{64}$")


class Denied(Exception):
    """The engine answered with a denial."""

    def __init__(self, reasons: Sequence[Dict[str, Any]]) -> None:
        super().__init__(f"{len(reasons)} reason(s)")
        self.reasons = list(reasons)


class ChainBroken(Exception):
    def __init__(self, index: Optional[int], reason: str) -> None:
        super().__init__(f"audit chain broken at index {index}: {reason}")
        self.index = index
        self.reason = reason


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, Denied):
        return EXIT_DENIED
    if isinstance(exc, ChainBroken):
        return EXIT_VERIFICATION
    if isinstance(exc, CapguardError) and exc.category == "verification":
        return EXIT_VERIFICATION
    if isinstance(exc, httpx.TransportError):
        return EXIT_TRANSPORT
    return EXIT_OTHER


# -- configuration ---------------------------------------------------------------------


@dataclass
class CliConfig:
    engine_url: Optional[str] = None
    guardian_urls: Dict[str, str] = field(default_factory=dict)
    opguard_url: Optional[str] = None
    keys: Dict[str, str] = field(default_factory=dict)
    output_dir: Path = Path(".")
    quiet: bool = False
    path: Optional[Path] = None

    @classmethod
    def load(cls, path: Optional[Path]) -> "CliConfig":
        if path is None:
            return cls()
        try:
            raw = canonical_decode(path.read_bytes())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except CapguardError as exc:
            raise ConfigError(f"config {path}: {exc.message}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base = path.parent
        cfg = cls(path=path)
        cfg.engine_url = raw.get("engine_url")
        cfg.opguard_url = raw.get("opguard_url")
        cfg.guardian_urls = dict(raw.get("guardian_urls", {}))
        cfg.keys = {k: str(base / v) for k, v in raw.get("keys", {}).items()}
        if "output_dir" in raw:
            cfg.output_dir = base / raw["output_dir"]
        for url in [cfg.engine_url, cfg.opguard_url, *cfg.guardian_urls.values()]:
            if url is not None and not _is_url(url):
                raise ConfigError(f"not an http(s) URL: {url!r}")
        return cfg

    def engine(self) -> EngineClient:
        if not self.engine_url:
            raise ConfigError("no engine URL (use --engine-url or engine_url in the config)")
        return EngineClient(self.engine_url)

    def guardian(self, asset_id: str, override: Optional[str]) -> GuardianClient:
        url = override or self.guardian_urls.get(asset_id) or self.guardian_urls.get("*")
        if not url:
            raise ConfigError(f"no guardian URL for asset {asset_id!r}")
        return GuardianClient(url)

    def key(self, ref: str) -> KeyPair:
        """A key by file path or by name from the config's ``keys`` table."""
        path = ref if os.path.exists(ref) or ref not in self.keys else self.keys[ref]
        return load_keypair(path)

    def key_id(self, ref: str) -> str:
        if _KEY_ID.match(ref):
            return ref
        return self.key(ref).key_id

    def write(self, out: Optional[str], default_name: str, data: bytes) -> Path:
        target = Path(out) if out else self.output_dir / default_name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        return target

    def say(self, message: str) -> None:
        if not self.quiet:
            click.echo(message)


def _is_url(value: Any) -> bool:
    if not isinstance(value, str):
        return False
    try:
        url = httpx.URL(value)
    except Exception:
        return False
    return url.scheme in ("http", "https") and bool(url.host)


pass_cfg = click.make_pass_decorator(CliConfig)


def _read_json(path: str) -> Any:
    try:
        return canonical_decode(Path(path).read_bytes())
    except OSError as exc:
        raise click.FileError(path, str(exc)) from None


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help=f"CLI config file (default ${ENV_VAR}).")
@click.option("--engine-url", help="Policy engine base URL.")
@click.option("--output-dir", type=click.Path(file_okay=False), help="Where artifacts are written.")
@click.option("--quiet", is_flag=True, help="Write artifacts only; print nothing.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], engine_url: Optional[str], output_dir: Optional[str], quiet: bool) -> None:
    """Policy-governed access to protected AI assets."""
    if ctx.invoked_subcommand == "serve":
        # service configs have their own schema; serve reads --config itself
        ctx.obj = CliConfig(path=Path(config_path) if config_path else None, quiet=quiet)
        return
    path = config_path or os.environ.get(ENV_VAR)
    cfg = CliConfig.load(Path(path) if path else None)
    if engine_url:
        if not _is_url(engine_url):
            raise click.BadParameter(f"not an http(s) URL: {engine_url!r}", param_hint="--engine-url")
        cfg.engine_url = engine_url
    if output_dir:
        cfg.output_dir = Path(output_dir)
    cfg.quiet = quiet
    ctx.obj = cfg


@cli.command()
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--public-out", type=click.Path(dir_okay=False), help="Also write the public half here.")
@click.option("--insecure-deterministic-seed", "seed", help="Hex seed (32 bytes). Reproducible test keys only.")
@pass_cfg
def keygen(cfg: CliConfig, out: str, public_out: Optional[str], seed: Optional[str]) -> None:
    """Generate an Ed25519 key file."""
    if seed is not None:
        try:
            seed_bytes = bytes.fromhex(seed)
        except ValueError:
            raise click.BadParameter("seed must be hex", param_hint="--insecure-deterministic-seed") from None
        kp = crypto.generate_keypair(seed_bytes)
    else:
        kp = crypto.generate_keypair()
    save_keypair(out, kp)
    if public_out:
        save_keypair(public_out, kp, include_private=False)
    cfg.say(kp.key_id)


# -- policy manager -----------------------------------------------------------------------


@cli.group()
def polman() -> None:
    """Author, register and manage policy objects."""


def _bounds(values: Sequence[str]) -> Dict[str, Dict[str, str]]:
    out = {}
    for v in values:
        name, _, rng = v.partition("=")
        lo, sep, hi = rng.partition(":")
        if not name or not sep:
            raise click.BadParameter(f"expected name=min:max, got {v!r}", param_hint="--param-bound")
        out[name] = {"min": lo, "max": hi}
    return out


@polman.command("init")
@click.option("--template", type=click.Choice(templates.TEMPLATES), required=True)
@click.option("--policy-id", default="dataset-policy")
@click.option("--asset-id", default="dataset")
@click.option("--owner-key", help="Owner key file, name or key id.")
@click.option("--designee", multiple=True, help="Designee key id or key file (repeatable).")
@click.option("--threshold", type=int, default=2)
@click.option("--payment-service", multiple=True)
@click.option("--min-amount", type=int, default=10000, help="Minimum payment in minor units.")
@click.option("--currency", default="USD")
@click.option("--attester", multiple=True)
@click.option("--code-measurement", multiple=True)
@click.option("--approver", multiple=True)
@click.option("--scope", default="non-commercial-research")
@click.option("--param-bound", multiple=True, help="name=min:max (repeatable).")
@click.option("--min-clients", type=int, default=2)
@click.option("--ttl", type=int, default=3600, help="Capability lifetime in seconds.")
@click.option("--single-use", is_flag=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False))
@pass_cfg
def polman_init(cfg: CliConfig, template: str, out: Optional[str], **kw: Any) -> None:
    """Write a policy document skeleton from a template."""
    ids = lambda refs: [cfg.key_id(r) for r in refs]  # noqa: E731
    doc = templates.render(
        template,
        policy_id=kw["policy_id"],
        asset_id=kw["asset_id"],
        owner_key_id=cfg.key_id(kw["owner_key"]) if kw["owner_key"] else templates.PLACEHOLDER,
        designees=ids(kw["designee"]),
        threshold=kw["threshold"],
        payment_services=ids(kw["payment_service"]),
        min_amount_minor=kw["min_amount"],
        currency=kw["currency"],
        attesters=ids(kw["attester"]),
        code_measurements=list(kw["code_measurement"]),
        approvers=ids(kw["approver"]),
        scope=kw["scope"],
        param_bounds=_bounds(kw["param_bound"]) if kw["param_bound"] else None,
        min_clients=kw["min_clients"],
        ttl_seconds=kw["ttl"],
        single_use=kw["single_use"],
    )
    path = cfg.write(out, f"{kw['policy_id']}.policy.json", canonical_encode(doc))
    cfg.say(f"wrote {path}")


def _registration(cfg: CliConfig, document: str, owner_key: str, anchors: Optional[str]) -> Dict[str, Any]:
    doc = _read_json(document)
    policy_from_dict(doc)  # fail locally before signing
    return registration_request(doc, cfg.key(owner_key), _read_json(anchors) if anchors else None)


@polman.command("register")
@click.argument("document", type=click.Path(exists=True, dir_okay=False))
@click.option("--owner-key", required=True)
@click.option("--anchors", type=click.Path(exists=True, dir_okay=False), help="Trust anchors file.")
@pass_cfg
def polman_register(cfg: CliConfig, document: str, owner_key: str, anchors: Optional[str]) -> None:
    """Sign and register version 1 of a policy."""
    resp = cfg.engine().register(_registration(cfg, document, owner_key, anchors))
    cfg.say(f"registered {resp['policy_id']} version {resp['version']}")


@polman.command("update")
@click.argument("document", type=click.Path(exists=True, dir_okay=False))
@click.option("--owner-key", required=True)
@click.option("--anchors", type=click.Path(exists=True, dir_okay=False))
@pass_cfg
def polman_update(cfg: CliConfig, document: str, owner_key: str, anchors: Optional[str]) -> None:
    """Sign and register the next version of a policy."""
    req = _registration(cfg, document, owner_key, anchors)
    resp = cfg.engine().update(req["policy"]["policy_id"], req)
    cfg.say(f"updated {resp['policy_id']} to version {resp['version']}")


def _status_change(cfg: CliConfig, action: str, policy_id: str, owner_key: str, version: Optional[int]) -> None:
    client = cfg.engine()
    if version is None:
        version = client.show(policy_id)["policy"]["version"]
    req = status_request(policy_id, action, version, cfg.key(owner_key))
    resp = getattr(client, action)(policy_id, req)
    cfg.say(f"{policy_id} version {resp['version']} is now {resp['status']}")


@polman.command("revoke")
@click.argument("policy_id")
@click.option("--owner-key", required=True)
@click.option("--version", type=int, help="Head version being revoked (default: current head).")
@pass_cfg
def polman_revoke(cfg: CliConfig, policy_id: str, owner_key: str, version: Optional[int]) -> None:
    """Stop issuing capabilities under a policy."""
    _status_change(cfg, "revoke", policy_id, owner_key, version)


@polman.command("archive")
@click.argument("policy_id")
@click.option("--owner-key", required=True)
@click.option("--version", type=int)
@pass_cfg
def polman_archive(cfg: CliConfig, policy_id: str, owner_key: str, version: Optional[int]) -> None:
    """Freeze a policy permanently."""
    _status_change(cfg, "archive", policy_id, owner_key, version)


@polman.command("show")
@click.argument("policy_id")
@click.option("-o", "--out", type=click.Path(dir_okay=False))
@pass_cfg
def polman_show(cfg: CliConfig, policy_id: str, out: Optional[str]) -> None:
    """Print the registered head of a policy."""
    head = cfg.engine().show(policy_id)
    data = canonical_encode(head)
    if out:
        cfg.write(out, "", data)
    cfg.say(data.decode())


@polman.command("protect")
@click.option("--store", required=True, type=click.Path(file_okay=False), help="Guardian store directory.")
@click.option("--asset-id", required=True)
@click.option("--payload", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy-id", required=True)
@click.option("--engine-key", "engine_keys", multiple=True, required=True, help="Trusted engine key id or file.")
@click.option("--name", default="")
@click.option("--description", default="")
@pass_cfg
def polman_protect(cfg: CliConfig, store: str, asset_id: str, payload: str, policy_id: str, engine_keys: Sequence[str], name: str, description: str) -> None:
    """Place an asset under a guardian, bound to a policy id."""
    data = Path(payload).read_bytes()
    record = make_asset(asset_id, data, policy_id, [cfg.key_id(k) for k in engine_keys], name, description)
    write_asset(store, record)
    cfg.say(f"protected {asset_id} ({record.metadata['content_digest']})")


# -- operations manager ---------------------------------------------------------------------


@cli.group()
def ops() -> None:
    """Gather evidence, request capabilities and use them."""


def _now(issued_at: Optional[int]) -> int:
    import time

    return issued_at if issued_at is not None else int(time.time())


def _emit_item(cfg: CliConfig, item: EvidenceItem, out: Optional[str], name: str) -> None:
    path = cfg.write(out, f"{name}.json", canonical_encode(item.to_dict()))
    cfg.say(f"wrote {item.evidence_type} to {path}")


issued_at_option = click.option("--issued-at", type=int, help="Unix seconds (default: now).")
out_option = click.option("-o", "--out", type=click.Path(dir_okay=False))


@ops.command("collect-signature")
@click.option("--designee-key", required=True)
@click.option("--asset-id", required=True)
@click.option("--operation", default="download")
@click.option("--subject", required=True, help="User key id or key file.")
@issued_at_option
@out_option
@pass_cfg
def ops_collect_signature(cfg: CliConfig, designee_key: str, asset_id: str, operation: str, subject: str, issued_at: Optional[int], out: Optional[str]) -> None:
    """Designee signs a request for a subject."""
    key = cfg.key(designee_key)
    item = signers.designee_signature(key, asset_id, operation, cfg.key_id(subject), _now(issued_at))
    _emit_item(cfg, item, out, f"signature-{key.key_id[:8]}")


@ops.command("mock-pay")
@click.option("--service-key", required=True)
@click.option("--payer", required=True)
@click.option("--amount", type=int, required=True, help="Minor units.")
@click.option("--currency", default="USD")
@click.option("--asset-id", required=True)
@click.option("--receipt-id", help="Default: random.")
@issued_at_option
@out_option
@pass_cfg
def ops_mock_pay(cfg: CliConfig, service_key: str, payer: str, amount: int, currency: str, asset_id: str, receipt_id: Optional[str], issued_at: Optional[int], out: Optional[str]) -> None:
    """Act as the payment service and issue a receipt."""
    rid = receipt_id or os.urandom(8).hex()
    item = signers.payment_receipt(cfg.key(service_key), cfg.key_id(payer), amount, currency, asset_id, rid, _now(issued_at))
    _emit_item(cfg, item, out, f"receipt-{rid}")


@ops.command("mock-attest")
@click.option("--attester-key", required=True)
@click.option("--tee", required=True, help="TEE key id or key file.")
@click.option("--ssh-enabled", is_flag=True)
@click.option("--ingress-port", type=int, multiple=True)
@click.option("--code-measurement", default="")
@issued_at_option
@out_option
@pass_cfg
def ops_mock_attest(cfg: CliConfig, attester_key: str, tee: str, ssh_enabled: bool, ingress_port: Sequence[int], code_measurement: str, issued_at: Optional[int], out: Optional[str]) -> None:
    """Act as the attestation service for a TEE."""
    tee_id = cfg.key_id(tee)
    item = signers.attestation_token(
        cfg.key(attester_key), tee_id, _now(issued_at), not ssh_enabled, list(ingress_port), code_measurement
    )
    _emit_item(cfg, item, out, f"attestation-{tee_id[:8]}")


@ops.command("mock-approve")
@click.option("--approver-key", required=True)
@click.option("--subject", required=True)
@click.option("--scope", default="non-commercial-research")
@click.option("--document", required=True, type=click.Path(exists=True, dir_okay=False), help="e.g. proposal PDF.")
@issued_at_option
@out_option
@pass_cfg
def ops_mock_approve(cfg: CliConfig, approver_key: str, subject: str, scope: str, document: str, issued_at: Optional[int], out: Optional[str]) -> None:
    """Act as an approver signing off on a document."""
    item = signers.approval(cfg.key(approver_key), cfg.key_id(subject), scope, Path(document).read_bytes(), _now(issued_at))
    _emit_item(cfg, item, out, "approval")


@ops.command("sign-spec")
@click.option("--user-key", required=True)
@click.option("--algorithm", required=True)
@click.option("--param", multiple=True, help="name=value (decimal string, repeatable).")
@click.option("--dataset", "datasets", multiple=True, required=True)
@click.option("--client-count", type=int)
@issued_at_option
@out_option
@pass_cfg
def ops_sign_spec(cfg: CliConfig, user_key: str, algorithm: str, param: Sequence[str], datasets: Sequence[str], client_count: Optional[int], issued_at: Optional[int], out: Optional[str]) -> None:
    """Sign a compute spec for a federated computation."""
    params = {}
    for p in param:
        name, sep, value = p.partition("=")
        if not sep or not name:
            raise click.BadParameter(f"expected name=value, got {p!r}", param_hint="--param")
        params[name] = value
    item = signers.compute_spec(cfg.key(user_key), algorithm, params, datasets, _now(issued_at), client_count)
    _emit_item(cfg, item, out, "compute-spec")


@ops.command("bundle")
@click.argument("items", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--user", required=True, help="Submitting user key id or key file.")
@out_option
@pass_cfg
def ops_bundle(cfg: CliConfig, items: Sequence[str], user: str, out: Optional[str]) -> None:
    """Combine evidence item files into a bundle."""
    bundle = EvidenceBundle(tuple(EvidenceItem.from_dict(_read_json(p)) for p in items), cfg.key_id(user))
    path = cfg.write(out, "bundle.json", canonical_encode(bundle.to_dict()))
    cfg.say(f"wrote bundle of {len(items)} item(s) to {path}")


def _clause_at(doc: Dict[str, Any], path: str) -> Optional[Dict[str, Any]]:
    node: Any = doc
    for part in path.split("."):
        m = re.fullmatch(r"(\w+)((?:\[\d+\])*)", part)
        if not m or not isinstance(node, dict) or m.group(1) not in node:
            return None
        node = node[m.group(1)]
        for idx in re.findall(r"\[(\d+)\]", m.group(2)):
            if not isinstance(node, list) or int(idx) >= len(node):
                return None
            node = node[int(idx)]
    return node if isinstance(node, dict) else None


def _short(ids: Sequence[str]) -> str:
    return ", ".join(k[:12] + "..." for k in ids)


def remediation_hint(reason: Dict[str, Any], clause: Optional[Dict[str, Any]]) -> str:
    """What the user should gather next for a failed clause."""
    ctype = reason.get("clause_type") or (clause or {}).get("type", "")
    code = reason.get("code", "")
    if code == "SubjectMismatch":
        return "all evidence must name the same subject key; re-issue items for one key"
    if code == "NoSubject":
        return "include evidence that names the requesting subject"
    if code == "PolicyNotActive":
        return "the policy is not registered for use; ask the owner"
    if code == "OperationNotCovered":
        return "request an operation listed in the policy"
    if reason.get("clause_path", "").startswith("evidence"):
        return "replace this item: it is stale, from an unknown issuer, or its signature does not verify"
    c = clause or {}
    if ctype == "signature_required":
        return f"collect {c.get('threshold', '?')} signatures from distinct designees: {_short(c.get('designee_key_ids', []))}"
    if ctype == "payment_required":
        amount = Decimal(c.get("min_amount_minor", 0)) / 100
        return f"obtain a receipt of at least {amount} {c.get('currency', '')} from an anchored payment service ({_short(c.get('service_key_ids', []))})"
    if ctype == "attestation_required":
        claims = c.get("required_claims", {})
        return (
            f"submit an attestation token from {_short(c.get('attester_key_ids', []))} with ssh disabled, "
            f"at most {claims.get('max_ingress_ports', 0)} ingress ports and an allowed code measurement"
        )
    if ctype == "approval_required":
        return f"obtain an approval for scope {c.get('scope', '')!r} from {_short(c.get('approver_key_ids', []))}"
    if ctype == "algorithm_constraint":
        bounds = ", ".join(f"{k} in [{v['min']}, {v['max']}]" for k, v in sorted(c.get("param_bounds", {}).items()))
        return (
            f"sign a spec using one of {c.get('allowed_algorithms', [])} with at least "
            f"{c.get('min_clients', '?')} clients" + (f" and {bounds}" if bounds else "")
        )
    if ctype == "any_of":
        return "satisfy at least one alternative"
    return "see reason"


def _evaluate(cfg: CliConfig, client: EngineClient, policy_id: str, operation: str, bundle: Dict[str, Any]) -> CapabilityPackage:
    resp = client.evaluate(policy_id, operation, bundle)
    if resp["outcome"] == "granted":
        return CapabilityPackage.from_dict(resp["capability"])
    try:
        doc = client.show(policy_id)["policy"]
    except (CapguardError, httpx.HTTPError):
        doc = {}
    if not cfg.quiet:
        click.echo(f"denied by {policy_id}:", err=True)
        for r in resp["reasons"]:
            hint = remediation_hint(r, _clause_at(doc, r["clause_path"]))
            label = r["clause_type"] or r["code"]
            click.echo(f"  {r['clause_path']} [{label}]: {r['reason']}", err=True)
            click.echo(f"    hint: {hint}", err=True)
    raise Denied(resp["reasons"])


@ops.command("evaluate")
@click.option("--policy-id", required=True)
@click.option("--operation", default="download")
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True, dir_okay=False))
@out_option
@pass_cfg
def ops_evaluate(cfg: CliConfig, policy_id: str, operation: str, bundle_path: str, out: Optional[str]) -> None:
    """Submit evidence; store the capability on grant."""
    cap = _evaluate(cfg, cfg.engine(), policy_id, operation, _read_json(bundle_path))
    path = cfg.write(out, f"capability-{cap.cap_id[:16]}.json", cap.encode())
    cfg.say(f"granted: {cap.cap_id} (expires {cap.expires_at}) -> {path}")


@ops.command("download")
@click.option("--capability", "cap_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--key", "key_ref", required=True, help="Key that opens the payload (user or TEE).")
@click.option("--guardian-url")
@out_option
@pass_cfg
def ops_download(cfg: CliConfig, cap_path: str, key_ref: str, guardian_url: Optional[str], out: Optional[str]) -> None:
    """Fetch a protected asset and open it."""
    cap = parse_capability(Path(cap_path).read_bytes())
    if guardian_url is not None and not _is_url(guardian_url):
        raise click.BadParameter(f"not an http(s) URL: {guardian_url!r}", param_hint="--guardian-url")
    sealed = cfg.guardian(cap.asset_id, guardian_url).download(cap.asset_id, cap)
    data = crypto.open_sealed(cfg.key(key_ref).private_key, sealed)
    path = cfg.write(out, f"{cap.asset_id}.bin", data)
    cfg.say(f"{path} sha256={digest(data)}")


@ops.command("fedavg")
@click.option("--request", "requests", multiple=True, help="POLICY_ID=BUNDLE_FILE to evaluate (repeatable).")
@click.option("--capability", "caps", multiple=True, type=click.Path(exists=True, dir_okay=False), help="Reuse an issued capability.")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), help="compute_spec item (default: taken from the bundles).")
@click.option("--opguard-url")
@out_option
@pass_cfg
def ops_fedavg(cfg: CliConfig, requests: Sequence[str], caps: Sequence[str], spec_path: Optional[str], opguard_url: Optional[str], out: Optional[str]) -> None:
    """Gather capabilities per provider policy and run FedAvg on the operation guardian."""
    capabilities: List[CapabilityPackage] = [parse_capability(Path(p).read_bytes()) for p in caps]
    spec_item: Optional[EvidenceItem] = EvidenceItem.from_dict(_read_json(spec_path)) if spec_path else None
    denials: List[Dict[str, Any]] = []
    client = cfg.engine() if requests else None
    for req in requests:
        policy_id, sep, bundle_path = req.partition("=")
        if not sep:
            raise click.BadParameter(f"expected POLICY_ID=BUNDLE_FILE, got {req!r}", param_hint="--request")
        bundle = _read_json(bundle_path)
        if spec_item is None:
            found = [i for i in bundle.get("items", []) if i.get("evidence_type") == "compute_spec"]
            spec_item = EvidenceItem.from_dict(found[0]) if found else None
        try:
            capabilities.append(_evaluate(cfg, client, policy_id, "execute:fedavg", bundle))
        except Denied as exc:
            denials.extend(exc.reasons)
    if denials:
        raise Denied(denials)
    if spec_item is None or spec_item.evidence_type != "compute_spec":
        raise SchemaError("no compute_spec item found (use --spec)")
    url = opguard_url or cfg.opguard_url
    if not url or not _is_url(url):
        raise ConfigError("no operation guardian URL (use --opguard-url or opguard_url in the config)")
    for cap in capabilities:
        cfg.write(None, f"capability-{cap.cap_id[:16]}.json", cap.encode())
    result = OpGuardClient(url).fedavg(capabilities, signers.spec_of(spec_item))
    path = cfg.write(out, "fedavg-result.json", canonical_encode(result))
    trace = result["loss_trace"]
    cfg.say(f"model={result['model']} loss {trace[0]} -> {trace[-1]} ({path})")


# -- auditing manager ------------------------------------------------------------------------


@cli.group()
def audit() -> None:
    """Verify and inspect the engine's audit log."""


@audit.command("verify")
@click.option("--log-file", type=click.Path(exists=True, dir_okay=False), help="Verify a log file instead of the engine's.")
@pass_cfg
def audit_verify(cfg: CliConfig, log_file: Optional[str]) -> None:
    """Check hash links over the whole log."""
    raw = Path(log_file).read_bytes() if log_file else cfg.engine().audit_raw()
    report = verify_chain(raw)
    if not report.ok:
        if not cfg.quiet:
            click.echo(f"broken: first_bad_index={report.first_bad_index} reason={report.reason}")
        raise ChainBroken(report.first_bad_index, report.reason)
    cfg.say(f"ok: {report.length} entries, head {report.head_hash}")


def _entry_line(e: Dict[str, Any]) -> str:
    details = e["details"]
    extra = " ".join(f"{k}={details[k]}" for k in ("asset_id", "operation", "cap_id", "status") if k in details)
    return f"{e['index']:>6} {e['timestamp']} {e['event_type']:<20} {e['policy_id']} v{e['policy_version']} {extra}".rstrip()


@audit.command("list")
@click.option("--policy-id")
@click.option("--asset-id")
@click.option("--actor")
@click.option("--event-type")
@click.option("--since", "since_index", type=int)
@click.option("--json", "as_json", is_flag=True, help="Print canonical JSON.")
@out_option
@pass_cfg
def audit_list(cfg: CliConfig, policy_id, asset_id, actor, event_type, since_index, as_json: bool, out: Optional[str]) -> None:
    """List entries matching filters."""
    entries = cfg.engine().audit_entries(
        policy_id=policy_id, asset_id=asset_id, actor_key_id=actor and cfg.key_id(actor),
        event_type=event_type, since_index=since_index,
    )
    if out:
        cfg.write(out, "", canonical_encode({"entries": entries}))
    if as_json:
        cfg.say(canonical_encode({"entries": entries}).decode())
    else:
        for e in entries:
            cfg.say(_entry_line(e))


@audit.command("trace-asset")
@click.argument("asset_id")
@pass_cfg
def audit_trace_asset(cfg: CliConfig, asset_id: str) -> None:
    """Ordered event history for one asset."""
    for e in cfg.engine().audit_entries(asset_id=asset_id):
        cfg.say(_entry_line(e))


# -- services and scenarios ----------------------------------------------------------------------


@cli.command()
@click.argument("kind", type=click.Choice(["engine", "guardian", "opguard"]))
@click.argument("config", required=False, type=click.Path(dir_okay=False))
@click.pass_context
def serve(ctx: click.Context, kind: str, config: Optional[str]) -> None:
    """Run a service until interrupted."""
    import logging

    from .config import resolve_config_path
    from .services import serve as run

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg: CliConfig = ctx.obj
    run(kind, resolve_config_path(config or cfg.path))


@cli.group()
def scenario() -> None:
    """Scripted end-to-end walkthroughs."""


@scenario.command("run")
@click.argument("name")
@click.option("--workspace", type=click.Path(file_okay=False), help="Empty directory (default: <output-dir>/<name>).")
@click.option("--seed", default="capguard")
@pass_cfg
def scenario_run(cfg: CliConfig, name: str, workspace: Optional[str], seed: str) -> None:
    """Run NAME: simple-download, tee-download, fedavg-study or decoupling."""
    from .errors import StepMismatch
    from .scenarios import SCENARIOS, run_scenario

    if name not in SCENARIOS:
        raise click.BadParameter(f"choose from {', '.join(SCENARIOS)}", param_hint="NAME")
    ws = Path(workspace) if workspace else cfg.output_dir / name
    try:
        report = run_scenario(name, ws, seed)
    except StepMismatch as exc:
        raise click.ClickException(exc.message) from None
    for s in report.steps:
        cfg.say(f"[{'ok' if s.ok else 'FAIL'}] {s.actor}: {s.step}")
    cfg.say(f"{report.steps_passed}/{len(report.steps)} steps, audit {'ok' if report.audit_ok else 'BROKEN'}; report in {ws / 'report.json'}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point with the exit-code contract; never lets click pick codes."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="capguard", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_OTHER
    except click.ClickException as exc:
        exc.show()
        return EXIT_OTHER
    except Denied:
        return EXIT_DENIED
    except ChainBroken:
        return EXIT_VERIFICATION
    except httpx.TransportError as exc:
        click.echo(f"error: cannot reach service: {exc}", err=True)
        return EXIT_TRANSPORT
    except CapguardError as exc:
        click.echo(f"error: {exc.code}: {exc.message}", err=True)
        return exit_code_for(exc)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
