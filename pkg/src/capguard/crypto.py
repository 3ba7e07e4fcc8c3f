"""Canonical encoding, hashing, Ed25519 signatures and sealed payloads.

Wire rules: UTF-8 JSON, keys sorted by byte value, no whitespace, no
floats, no nulls, integers limited to the signed 64-bit range.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

import nacl.bindings as sodium
import nacl.exceptions
import nacl.signing

from .errors import AuthenticationFailure, BadSeedLength, NonCanonicalizable, ParseError

INT_MIN = -(2**63)
INT_MAX = 2**63 - 1
ZERO_HASH = "0" * 64

_SEAL_CONTEXT = b"capguard/seal/v1"


def _check(value: Any, path: str = "$") -> None:
    if isinstance(value, bool) or isinstance(value, str):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError:
                raise NonCanonicalizable(f"{path}: string is not valid UTF-8") from None
        return
    if isinstance(value, int):
        if not INT_MIN <= value <= INT_MAX:
            raise NonCanonicalizable(f"{path}: integer outside signed 64-bit range")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise NonCanonicalizable(f"{path}: non-string key {k!r}")
            _check(k, path)
            _check(v, f"{path}.{k}")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check(v, f"{path}[{i}]")
        return
    if isinstance(value, float):
        raise NonCanonicalizable(f"{path}: floats are not allowed on the wire")
    raise NonCanonicalizable(f"{path}: unsupported type {type(value).__name__}")


def canonical_encode(value: Any) -> bytes:
    """Encode a wire-subset value to its unique canonical bytes."""
    _check(value)
    # Code-point order of str keys equals UTF-8 byte order.
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _reject_float(text: str) -> Any:
    raise ParseError(f"float literal {text!r} not allowed")


def _reject_constant(text: str) -> Any:
    raise ParseError(f"constant {text!r} not allowed")


def _no_duplicates(pairs: list) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for k, v in pairs:
        if k in out:
            raise ParseError(f"duplicate key {k!r}")
        out[k] = v
    return out


def canonical_decode(data: bytes | str) -> Any:
    """Parse JSON text restricted to the wire subset.

    Accepts any whitespace/key order; use :func:`is_canonical` to demand
    the exact canonical form.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"invalid UTF-8: {exc}") from None
    try:
        value = json.loads(
            data,
            parse_float=_reject_float,
            parse_constant=_reject_constant,
            object_pairs_hook=_no_duplicates,
        )
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from None
    except RecursionError:
        raise ParseError("nesting too deep") from None
    try:
        _check(value)
    except NonCanonicalizable as exc:
        raise ParseError(str(exc)) from None
    return value


def is_canonical(data: bytes) -> bool:
    try:
        return canonical_encode(canonical_decode(data)) == data
    except (ParseError, NonCanonicalizable):
        return False


def digest(data: bytes) -> str:
    """SHA-256 as 64-char lowercase hex."""
    return hashlib.sha256(data).hexdigest()


def digest_value(value: Any) -> str:
    return digest(canonical_encode(value))


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    private_key: bytes = b""

    def __post_init__(self) -> None:
        if len(self.public_key) != 32:
            raise ValueError("public key must be 32 bytes")

    @property
    def key_id(self) -> str:
        return self.public_key.hex()

    @property
    def has_private(self) -> bool:
        return len(self.private_key) == 32

    def to_dict(self, include_private: bool = True) -> Dict[str, str]:
        out = {"key_id": self.key_id, "public_key": self.public_key.hex()}
        if include_private and self.has_private:
            out["private_key"] = self.private_key.hex()
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KeyPair":
        try:
            public = bytes.fromhex(data["public_key"])
            private = bytes.fromhex(data.get("private_key", ""))
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad key document: {exc}") from None
        if private:
            derived = nacl.signing.SigningKey(private).verify_key.encode()
            if derived != public:
                raise ParseError("private key does not match public key")
        if "key_id" in data and data["key_id"] != public.hex():
            raise ParseError("key_id does not match public key")
        return cls(public, private)


def generate_keypair(seed: Optional[bytes] = None) -> KeyPair:
    """New Ed25519 key pair; deterministic when ``seed`` is given."""
    if seed is None:
        seed = os.urandom(32)
    elif len(seed) != 32:
        raise BadSeedLength(f"seed must be 32 bytes, got {len(seed)}")
    sk = nacl.signing.SigningKey(bytes(seed))
    return KeyPair(public_key=sk.verify_key.encode(), private_key=bytes(seed))


def public_key_from_id(key_id: str) -> bytes:
    try:
        raw = bytes.fromhex(key_id)
    except (ValueError, TypeError):
        raise ValueError(f"key id is not hex: {key_id!r}") from None
    if len(raw) != 32 or key_id != raw.hex():
        raise ValueError(f"key id must be 64 lowercase hex chars: {key_id!r}")
    return raw


def sign(private_key: bytes, message: bytes) -> bytes:
    return nacl.signing.SigningKey(private_key).sign(message).signature


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        nacl.signing.VerifyKey(bytes(public_key)).verify(bytes(message), bytes(signature))
        return True
    except (nacl.exceptions.BadSignatureError, nacl.exceptions.ValueError, ValueError, TypeError):
        return False


@dataclass(frozen=True)
class SealedPayload:
    ephemeral_public: bytes
    nonce: bytes
    ciphertext: bytes

    def to_dict(self) -> Dict[str, str]:
        return {
            "ephemeral_public": self.ephemeral_public.hex(),
            "nonce": self.nonce.hex(),
            "ciphertext": self.ciphertext.hex(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SealedPayload":
        try:
            sealed = cls(
                bytes.fromhex(data["ephemeral_public"]),
                bytes.fromhex(data["nonce"]),
                bytes.fromhex(data["ciphertext"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad sealed payload: {exc}") from None
        if len(sealed.ephemeral_public) != 32 or len(sealed.nonce) != 24:
            raise ParseError("bad sealed payload field lengths")
        return sealed


def _seal_key(shared: bytes, eph_pub: bytes, recipient_x: bytes) -> bytes:
    return hashlib.sha256(_SEAL_CONTEXT + shared + eph_pub + recipient_x).digest()


def seal(recipient_public_key: bytes, plaintext: bytes) -> SealedPayload:
    """Encrypt to an Ed25519 identity (converted to X25519 for the exchange)."""
    recipient_x = sodium.crypto_sign_ed25519_pk_to_curve25519(bytes(recipient_public_key))
    eph_priv = os.urandom(32)
    eph_pub = sodium.crypto_scalarmult_base(eph_priv)
    shared = sodium.crypto_scalarmult(eph_priv, recipient_x)
    key = _seal_key(shared, eph_pub, recipient_x)
    nonce = os.urandom(24)
    ct = sodium.crypto_aead_xchacha20poly1305_ietf_encrypt(bytes(plaintext), eph_pub, nonce, key)
    return SealedPayload(eph_pub, nonce, ct)


def open_sealed(recipient_private_key: bytes, sealed: SealedPayload) -> bytes:
    """Inverse of :func:`seal`; raises AuthenticationFailure on any mismatch."""
    try:
        sk = nacl.signing.SigningKey(bytes(recipient_private_key))
        full = bytes(recipient_private_key) + sk.verify_key.encode()
        recipient_priv_x = sodium.crypto_sign_ed25519_sk_to_curve25519(full)
        recipient_x = sodium.crypto_scalarmult_base(recipient_priv_x)
        shared = sodium.crypto_scalarmult(recipient_priv_x, sealed.ephemeral_public)
        key = _seal_key(shared, sealed.ephemeral_public, recipient_x)
        return sodium.crypto_aead_xchacha20poly1305_ietf_decrypt(
            sealed.ciphertext, sealed.ephemeral_public, sealed.nonce, key
        )
    except (nacl.exceptions.CryptoError, ValueError, TypeError) as exc:
        raise AuthenticationFailure(f"cannot open sealed payload: {exc}") from None
