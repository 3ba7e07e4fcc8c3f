import hashlib
from typing import Any, Dict, List, Sequence

import pytest

from capguard import crypto, signers, templates
from capguard.clock import LogicalClock
from capguard.crypto import KeyPair
from capguard.engine import EvaluationRequest, PolicyEngine, registration_request
from capguard.evidence import EvidenceBundle, EvidenceItem

T0 = 1_700_000_000


def seeded(name: str) -> KeyPair:
    return crypto.generate_keypair(hashlib.sha256(f"tests/{name}".encode()).digest())


class Keys:
    """Lazily created, deterministic named keys."""

    def __init__(self) -> None:
        self._keys: Dict[str, KeyPair] = {}

    def __getitem__(self, name: str) -> KeyPair:
        if name not in self._keys:
            self._keys[name] = seeded(name)
        return self._keys[name]

    def id(self, name: str) -> str:
        return self[name].key_id


@pytest.fixture()
def keys() -> Keys:
    return Keys()


@pytest.fixture()
def clock() -> LogicalClock:
    return LogicalClock(T0)


def paid_download_doc(keys: Keys, threshold: int = 2, **kw: Any) -> Dict[str, Any]:
    args = dict(
        policy_id="p1",
        asset_id="ds1",
        owner_key_id=keys.id("owner"),
        designees=[keys.id("d1"), keys.id("d2"), keys.id("d3")],
        threshold=threshold,
        payment_services=[keys.id("pay")],
    )
    overrides = {k: kw.pop(k) for k in ("version", "status") if k in kw}
    args.update(kw)
    doc = templates.render("paid-download", **args)
    doc.update(overrides)
    return doc


def make_engine(keys: Keys, clock: LogicalClock, storage=None, owners: Sequence[str] = ("owner",)) -> PolicyEngine:
    return PolicyEngine(keys["engine"], {keys.id(o): keys[o].public_key for o in owners}, storage, clock)


@pytest.fixture()
def engine(keys, clock, tmp_path) -> PolicyEngine:
    return make_engine(keys, clock, tmp_path / "engine")


@pytest.fixture()
def registered(engine, keys):
    """Engine with the paid-download policy p1 registered."""
    engine.register_policy(registration_request(paid_download_doc(keys), keys["owner"]))
    return engine


def paid_evidence(keys: Keys, now: int, user: str = "user", designees=("d1", "d2"), amount: int = 10000) -> List[EvidenceItem]:
    items = [signers.designee_signature(keys[d], "ds1", "download", keys.id(user), now) for d in designees]
    items.append(signers.payment_receipt(keys["pay"], keys.id(user), amount, "USD", "ds1", "r-1", now))
    return items


def request(keys: Keys, items: Sequence[EvidenceItem], policy_id: str = "p1", operation: str = "download", user: str = "user") -> EvaluationRequest:
    return EvaluationRequest(policy_id, operation, EvidenceBundle(tuple(items), keys.id(user)))


# -- acceptance report -------------------------------------------------------------------

ACCEPTANCE: List[str] = []


def pytest_terminal_summary(terminalreporter) -> None:
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
