"""Service configuration files (JSON) and key files."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .crypto import KeyPair, canonical_decode, canonical_encode, digest
from .errors import CapguardError, ConfigError

ENV_VAR = "CAPGUARD_CONFIG"


def resolve_config_path(path: Optional[os.PathLike]) -> Path:
    """An explicit path wins over the environment variable."""
    if path is not None:
        return Path(path)
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    raise ConfigError(f"no config file given (use --config or {ENV_VAR})")


def load_keypair(path: os.PathLike) -> KeyPair:
    p = Path(path)
    try:
        return KeyPair.from_dict(canonical_decode(p.read_bytes()))
    except FileNotFoundError:
        raise ConfigError(f"key file not found: {p}") from None
    except CapguardError as exc:
        raise ConfigError(f"bad key file {p}: {exc.message}") from None


def save_keypair(path: os.PathLike, keypair: KeyPair, include_private: bool = True) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(canonical_encode(keypair.to_dict(include_private)))
    if include_private:
        os.chmod(p, 0o600)


def parse_listen(value: Any) -> Tuple[str, int]:
    if not isinstance(value, str) or ":" not in value:
        raise ConfigError(f"listen must be 'host:port', got {value!r}")
    host, _, port = value.rpartition(":")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in {value!r}") from None


@dataclass
class ServiceConfig:
    kind: str
    path: Path
    raw: Dict[str, Any]
    digest: str
    listen: Tuple[str, int]
    keypair: KeyPair

    def path_field(self, name: str) -> Path:
        value = self.raw.get(name)
        if not isinstance(value, str):
            raise ConfigError(f"{self.kind} config needs {name}")
        p = Path(value)
        return p if p.is_absolute() else self.path.parent / p

    def key_ids(self, name: str) -> List[str]:
        value = self.raw.get(name, [])
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{name} must be a list of key ids")
        return value


_REQUIRED = {
    "engine": ("listen", "key_path", "owner_key_ids", "storage_dir"),
    "guardian": ("listen", "key_path", "trusted_engine_key_ids", "store_dir"),
    "opguard": ("listen", "key_path", "trusted_engine_key_ids", "asset_guardians"),
}


def load_config(kind: str, path: os.PathLike) -> ServiceConfig:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    try:
        raw = canonical_decode(data)
    except CapguardError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc.message}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for name in _REQUIRED[kind]:
        if name not in raw:
            raise ConfigError(f"{kind} config is missing {name}")
    key_path = Path(raw["key_path"])
    if not key_path.is_absolute():
        key_path = p.parent / key_path
    return ServiceConfig(kind, p, raw, digest(data), parse_listen(raw["listen"]), load_keypair(key_path))
