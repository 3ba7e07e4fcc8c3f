"""Asset guardians and the FedAvg operation guardian.

Guardians act on capability packages only. Nothing here reads policy
objects or clause trees.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence

from . import crypto, fedavg
from .capability import CapabilityPackage, verify_capability
from .clock import Clock, SystemClock
from .crypto import KeyPair, SealedPayload, canonical_decode, canonical_encode, digest, digest_value
from .errors import (
    CapguardError,
    DigestMismatch,
    DuplicateAsset,
    InsufficientClients,
    OperationMismatch,
    ParseError,
    ReplayDetected,
    SchemaError,
    SpecDigestMismatch,
    StorageError,
    SubjectMismatch,
    UnknownAsset,
    UnsupportedAlgorithm,
    UpstreamError,
    ValidationError,
)
from .policy import is_ident, parse_decimal

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 10
FEDAVG_OPERATION = "execute:fedavg"


@dataclass(frozen=True)
class AssetRecord:
    asset_id: str
    payload: bytes
    policy_id: str
    trusted_engine_key_ids: tuple
    metadata: Dict[str, Any]

    def check(self) -> None:
        if not is_ident(self.asset_id):
            raise SchemaError(f"bad asset id {self.asset_id!r}")
        if not self.trusted_engine_key_ids:
            raise SchemaError("asset needs at least one trusted engine key")
        for k in self.trusted_engine_key_ids:
            crypto.public_key_from_id(k)
        if self.metadata.get("content_digest") != digest(self.payload):
            raise DigestMismatch(f"payload digest does not match metadata for {self.asset_id}")

    def record_dict(self) -> Dict[str, Any]:
        """Everything but the payload bytes."""
        return {
            "asset_id": self.asset_id,
            "policy_id": self.policy_id,
            "trusted_engine_key_ids": list(self.trusted_engine_key_ids),
            "metadata": self.metadata,
        }

    def catalog_entry(self) -> Dict[str, Any]:
        return {"asset_id": self.asset_id, "policy_id": self.policy_id, "metadata": self.metadata}


def make_asset(
    asset_id: str,
    payload: bytes,
    policy_id: str,
    trusted_engine_key_ids: Sequence[str],
    name: str = "",
    description: str = "",
) -> AssetRecord:
    meta = {"name": name or asset_id, "description": description, "content_digest": digest(payload), "size": len(payload)}
    return AssetRecord(asset_id, payload, policy_id, tuple(trusted_engine_key_ids), meta)


def write_asset(store_dir: os.PathLike, record: AssetRecord) -> Path:
    """Place an asset into a guardian store directory (offline protection)."""
    record.check()
    target = Path(store_dir) / record.asset_id
    if target.exists():
        raise DuplicateAsset(f"asset {record.asset_id} already in store")
    target.mkdir(parents=True)
    (target / "payload.bin").write_bytes(record.payload)
    # record.json appears last and atomically; scanners treat it as the commit marker
    tmp = target / "record.json.tmp"
    tmp.write_bytes(canonical_encode(record.record_dict()))
    os.replace(tmp, target / "record.json")
    return target


def read_asset(path: Path) -> AssetRecord:
    data = canonical_decode((path / "record.json").read_bytes())
    payload = (path / "payload.bin").read_bytes()
    return AssetRecord(
        data["asset_id"], payload, data["policy_id"], tuple(data["trusted_engine_key_ids"]), data["metadata"]
    )


class NonceLedger:
    """Consumed single-use cap_ids with their expiry; check-and-insert is atomic."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = path
        self._seen: Dict[str, int] = {}
        self._lock = threading.Lock()
        if path is not None and path.exists():
            for line in path.read_bytes().splitlines():
                try:
                    rec = canonical_decode(line)
                    self._seen[rec["cap_id"]] = rec["expires_at"]
                except (ParseError, KeyError, TypeError):
                    log.warning("nonce ledger: skipping unreadable line")

    def consume(self, cap_id: str, expires_at: int, now: int) -> None:
        with self._lock:
            for k in [k for k, exp in self._seen.items() if exp < now]:
                del self._seen[k]
            if cap_id in self._seen:
                raise ReplayDetected(f"single-use capability {cap_id[:16]}... already used")
            if self.path is not None:
                with open(self.path, "ab") as fh:
                    fh.write(canonical_encode({"cap_id": cap_id, "expires_at": expires_at}) + b"\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            self._seen[cap_id] = expires_at

    def __contains__(self, cap_id: str) -> bool:
        with self._lock:
            return cap_id in self._seen


class AssetGuardian:
    def __init__(
        self,
        keypair: Optional[KeyPair] = None,
        store_dir: Optional[os.PathLike] = None,
        trusted_engine_key_ids: Sequence[str] = (),
        clock: Optional[Clock] = None,
        config_digest: str = "",
    ) -> None:
        self.keypair = keypair
        self.clock = clock or SystemClock()
        self.trusted_engine_key_ids = tuple(trusted_engine_key_ids)
        self.store_dir = Path(store_dir) if store_dir is not None else None
        self.config_digest = config_digest
        self._assets: Dict[str, AssetRecord] = {}
        self._lock = threading.Lock()
        ledger_path = None
        if self.store_dir is not None:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            ledger_path = self.store_dir / ".nonces.jsonl"
            self._scan()
        self.nonces = NonceLedger(ledger_path)

    def _scan(self) -> None:
        """Pick up assets placed into the store directory since the last scan."""
        if self.store_dir is None:
            return
        with self._lock:
            for sub in sorted(p for p in self.store_dir.iterdir() if p.is_dir()):
                if sub.name in self._assets or not (sub / "record.json").exists():
                    continue
                rec = read_asset(sub)
                rec.check()
                self._assets[rec.asset_id] = rec

    def register_asset(self, record: AssetRecord) -> str:
        if not record.trusted_engine_key_ids and self.trusted_engine_key_ids:
            record = AssetRecord(record.asset_id, record.payload, record.policy_id, self.trusted_engine_key_ids, record.metadata)
        record.check()
        with self._lock:
            if record.asset_id in self._assets:
                raise DuplicateAsset(f"asset {record.asset_id} already registered")
            if self.store_dir is not None:
                write_asset(self.store_dir, record)
            self._assets[record.asset_id] = record
        return record.asset_id

    def catalog(self) -> List[Dict[str, Any]]:
        self._scan()
        with self._lock:
            return [self._assets[k].catalog_entry() for k in sorted(self._assets)]

    def download(
        self,
        asset_id: str,
        capability: CapabilityPackage,
        clock: Optional[Clock] = None,
        operation: str = "download",
    ) -> SealedPayload:
        """Release the asset sealed to the capability's subject.

        ``operation`` is ``download`` for users; operation guardians fetch
        inputs with their ``execute:*`` capability, which must name an
        attested (tee) subject.
        """
        clock = clock or self.clock
        with self._lock:
            record = self._assets.get(asset_id)
        if record is None:
            self._scan()
            with self._lock:
                record = self._assets.get(asset_id)
        if record is None:
            raise UnknownAsset(f"no asset {asset_id!r}")
        if operation != "download" and not operation.startswith("execute:"):
            raise OperationMismatch(f"guardian does not serve operation {operation!r}")
        trusted = {k: crypto.public_key_from_id(k) for k in record.trusted_engine_key_ids}
        expected = {"asset_id": asset_id, "operation": operation, "policy_id": record.policy_id}
        verify_capability(capability, trusted, expected, clock)
        if operation != "download" and capability.subject_kind != "tee":
            raise SubjectMismatch("raw inputs for computations are released only to attested environments")
        if capability.single_use:
            self.nonces.consume(capability.cap_id, capability.expires_at, clock.now())
        return crypto.seal(crypto.public_key_from_id(capability.subject_key_id), record.payload)


# -- operation guardian ----------------------------------------------------------------


@dataclass(frozen=True)
class ComputeSpec:
    algorithm: str
    params: Dict[str, str]
    client_count: int
    dataset_ids: tuple

    def to_dict(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "params": dict(self.params),
            "client_count": self.client_count,
            "dataset_ids": list(self.dataset_ids),
        }

    def digest(self) -> str:
        return digest_value(self.to_dict())

    @classmethod
    def from_dict(cls, data: Any) -> "ComputeSpec":
        if not isinstance(data, dict) or set(data) != {"algorithm", "params", "client_count", "dataset_ids"}:
            raise SchemaError("spec must have exactly algorithm, params, client_count, dataset_ids")
        if not isinstance(data["algorithm"], str) or not isinstance(data["params"], dict):
            raise SchemaError("bad spec algorithm/params")
        try:
            for k, v in data["params"].items():
                parse_decimal(v, f"params.{k}")
        except ValidationError as exc:
            raise SchemaError(str(exc)) from None
        cc = data["client_count"]
        if isinstance(cc, bool) or not isinstance(cc, int) or cc < 1:
            raise SchemaError("client_count must be a positive integer")
        ids = data["dataset_ids"]
        if not isinstance(ids, list) or not all(isinstance(x, str) for x in ids) or len(set(ids)) != len(ids):
            raise SchemaError("dataset_ids must be unique strings")
        return cls(data["algorithm"], dict(data["params"]), cc, tuple(ids))

    def int_param(self, name: str, default: int) -> int:
        if name not in self.params:
            return default
        value = Decimal(self.params[name])
        if value != value.to_integral_value() or value < 1:
            raise SchemaError(f"{name} must be a positive integer")
        return int(value)

    def float_param(self, name: str, default: float) -> float:
        return float(Decimal(self.params[name])) if name in self.params else default


class AssetSource(Protocol):
    def fetch(self, asset_id: str, capability: CapabilityPackage, operation: str) -> SealedPayload: ...


class LocalSource:
    """Co-located asset guardian (desk-scale harness)."""

    def __init__(self, guardian: AssetGuardian) -> None:
        self.guardian = guardian

    def fetch(self, asset_id: str, capability: CapabilityPackage, operation: str) -> SealedPayload:
        return self.guardian.download(asset_id, capability, operation=operation)


class OperationGuardian:
    def __init__(
        self,
        keypair: KeyPair,
        trusted_engine_key_ids: Sequence[str],
        sources: Mapping[str, AssetSource],
        clock: Optional[Clock] = None,
        config_digest: str = "",
    ) -> None:
        self.keypair = keypair
        self.trusted = {k: crypto.public_key_from_id(k) for k in trusted_engine_key_ids}
        self.sources = dict(sources)
        self.clock = clock or SystemClock()
        self.config_digest = config_digest

    def execute_fedavg(
        self,
        capabilities: Sequence[CapabilityPackage],
        spec: ComputeSpec,
        clock: Optional[Clock] = None,
    ) -> Dict[str, Any]:
        clock = clock or self.clock
        if spec.algorithm != "fedavg":
            raise UnsupportedAlgorithm(f"this guardian executes only fedavg, not {spec.algorithm!r}")
        if len(spec.dataset_ids) != spec.client_count:
            raise InsufficientClients("dataset_ids length differs from client_count")
        by_asset: Dict[str, CapabilityPackage] = {}
        for cap in capabilities:
            by_asset.setdefault(cap.asset_id, cap)
        missing = [d for d in spec.dataset_ids if d not in by_asset]
        if missing:
            raise InsufficientClients(
                f"{len(spec.dataset_ids) - len(missing)} capabilities for a {spec.client_count}-client spec",
                missing=missing,
            )
        spec_digest = spec.digest()
        for ds in spec.dataset_ids:
            cap = by_asset[ds]
            verify_capability(cap, self.trusted, {"asset_id": ds, "operation": FEDAVG_OPERATION}, clock)
            if cap.constraints.get("compute_spec_digest") != spec_digest:
                raise SpecDigestMismatch(f"spec differs from the one approved for {ds}")
            if cap.subject_key_id != self.keypair.key_id:
                raise SubjectMismatch(f"capability for {ds} is not bound to this guardian")

        datasets = []
        for ds in spec.dataset_ids:
            source = self.sources.get(ds)
            if source is None:
                raise UnknownAsset(f"no asset guardian known for {ds!r}")
            try:
                sealed = source.fetch(ds, by_asset[ds], FEDAVG_OPERATION)
            except CapguardError:
                raise
            except Exception as exc:  # transport failures
                raise UpstreamError(f"fetching {ds}: {exc}") from None
            raw = crypto.open_sealed(self.keypair.private_key, sealed)
            try:
                datasets.append(fedavg.dataset_from_csv(raw))
            except ValueError as exc:
                raise SchemaError(f"dataset {ds} is not a numeric CSV: {exc}") from None

        lr = spec.float_param("learning_rate", 0.1)
        epochs = spec.int_param("local_epochs", 1)
        rounds = spec.int_param("rounds", DEFAULT_ROUNDS)
        w, trace = fedavg.fedavg(datasets, lr, epochs, rounds)
        return {
            "model": [repr(float(v)) for v in w],
            "rounds": rounds,
            "loss_trace": [repr(float(v)) for v in trace],
            "sample_counts": [len(y) for _, y in datasets],
            "compute_spec_digest": spec_digest,
        }
