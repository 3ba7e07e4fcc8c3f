"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) used on the wire
as ``error_code`` and an HTTP status used by the services.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class CapguardError(Exception):
    http_status = 400
    # CLI exit-code family: "verification" -> 3, anything else -> 1
    category = "other"

    def __init__(self, message: str = "", **details: Any) -> None:
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__
        self.details: Dict[str, Any] = details

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_wire(self) -> Dict[str, Any]:
        return {"error_code": self.code, "message": self.message, "details": self.details}


class VerificationError(CapguardError):
    category = "verification"
    http_status = 403


# crypto_core
class NonCanonicalizable(CapguardError):
    pass


class BadSeedLength(CapguardError):
    pass


class AuthenticationFailure(VerificationError):
    pass


# policy_model
class ParseError(CapguardError):
    pass


class ValidationError(CapguardError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}", path=path)
        self.path = path


class VersionError(CapguardError):
    http_status = 409


class OwnerMismatch(VerificationError):
    pass


class AssetMismatch(VerificationError):
    pass


class ArchivedPolicy(CapguardError):
    http_status = 409


# evidence
class UnknownIssuer(VerificationError):
    pass


class BadSignature(VerificationError):
    pass


class SchemaError(CapguardError):
    pass


class StaleEvidence(VerificationError):
    pass


class FutureTimestamp(VerificationError):
    pass


class SubjectMismatch(VerificationError):
    pass


class NoSubject(VerificationError):
    pass


# capability
class PolicyNotActive(CapguardError):
    http_status = 409


class OperationNotCovered(CapguardError):
    pass


class UntrustedIssuer(VerificationError):
    pass


class CapIdMismatch(VerificationError):
    pass


class OperationMismatch(VerificationError):
    pass


class PolicyMismatch(VerificationError):
    pass


class Expired(VerificationError):
    pass


class NotYetValid(VerificationError):
    pass


# audit_log
class StorageError(CapguardError):
    http_status = 500


# engine_service
class UnknownOwner(VerificationError):
    pass


class DuplicateVersion(CapguardError):
    http_status = 409


class UnknownPolicy(CapguardError):
    http_status = 404


class ConfigError(CapguardError):
    pass


class BindError(CapguardError):
    pass


# guardian_service
class DuplicateAsset(CapguardError):
    http_status = 409


class DigestMismatch(VerificationError):
    pass


class ReplayDetected(VerificationError):
    http_status = 409


class UnknownAsset(CapguardError):
    http_status = 404


class SpecDigestMismatch(VerificationError):
    pass


class InsufficientClients(CapguardError):
    pass


class UnsupportedAlgorithm(CapguardError):
    pass


class UpstreamError(CapguardError):
    """An asset guardian called by the operation guardian failed."""

    http_status = 502


# scenarios
class StepMismatch(CapguardError):
    def __init__(self, step: str, expected: Any, actual: Any) -> None:
        super().__init__(
            f"step {step!r}: expected {expected!r}, got {actual!r}",
            step=step,
            expected=str(expected),
            actual=str(actual),
        )
        self.step = step
        self.expected = expected
        self.actual = actual


_REGISTRY: Dict[str, type] = {}


def _collect(cls: type) -> None:
    _REGISTRY[cls.__name__] = cls
    for sub in cls.__subclasses__():
        _collect(sub)


_collect(CapguardError)


def error_class(code: str) -> Optional[type]:
    """Look up an error class by its wire code."""
    return _REGISTRY.get(code)
