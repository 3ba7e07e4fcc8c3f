import random

import pytest

from capguard.audit import AuditEvent, AuditLog, AuditQuery, entry_hash, verify_chain
from capguard.crypto import ZERO_HASH, canonical_decode, canonical_encode, digest_value
from capguard.errors import StorageError


def fill(log, n, start=0):
    for i in range(start, start + n):
        log.append(
            AuditEvent(
                "evaluation_denied" if i % 3 else "policy_registered",
                f"{i % 4:064x}",
                f"p{i % 2}",
                1,
                {"asset_id": f"a{i % 3}", "i": i},
            )
        )


class TestAppend:
    def test_chain_links(self, clock):
        log = AuditLog(None, clock)
        fill(log, 5)
        entries = log.entries()
        assert entries[0].prev_hash == ZERO_HASH
        for prev, cur in zip(entries, entries[1:]):
            assert cur.prev_hash == prev.entry_hash and cur.index == prev.index + 1
        assert log.head() == {"length": 5, "last_index": 4, "head_hash": entries[-1].entry_hash}

    def test_empty_log(self, clock):
        log = AuditLog(None, clock)
        assert verify_chain(log).ok and log.head()["head_hash"] == ZERO_HASH

    def test_unknown_event_type(self, clock):
        with pytest.raises(ValueError):
            AuditLog(None, clock).append(AuditEvent("gossip", "k", "p", 1))

    def test_persisted_lines_are_canonical(self, tmp_path, clock):
        log = AuditLog(tmp_path / "audit.log", clock)
        fill(log, 3)
        lines = (tmp_path / "audit.log").read_bytes().splitlines()
        assert [canonical_encode(canonical_decode(line)) for line in lines] == lines
        assert log.raw() == (tmp_path / "audit.log").read_bytes()

    def test_append_many_is_one_write(self, tmp_path, clock):
        log = AuditLog(tmp_path / "audit.log", clock)
        entries = log.append_many([AuditEvent("evaluation_granted", "u", "p", 1), AuditEvent("capability_issued", "e", "p", 1)])
        assert [e.index for e in entries] == [0, 1]
        assert entries[1].prev_hash == entries[0].entry_hash


class TestRecovery:
    def test_reopen_continues_chain(self, tmp_path, clock):
        path = tmp_path / "audit.log"
        fill(AuditLog(path, clock), 4)
        log = AuditLog(path, clock)
        fill(log, 2, start=4)
        assert verify_chain(log).ok and len(log) == 6

    def test_torn_tail_is_dropped(self, tmp_path, clock):
        path = tmp_path / "audit.log"
        fill(AuditLog(path, clock), 3)
        with open(path, "ab") as fh:
            fh.write(b'{"index":3,"timest')
        log = AuditLog(path, clock)
        assert len(log) == 3 and path.read_bytes().endswith(b"\n")
        fill(log, 1, start=3)
        assert verify_chain(log).ok

    def test_broken_chain_refuses_to_open(self, tmp_path, clock):
        path = tmp_path / "audit.log"
        fill(AuditLog(path, clock), 3)
        data = path.read_bytes().replace(b'"i":1', b'"i":7')
        path.write_bytes(data)
        with pytest.raises(StorageError):
            AuditLog(path, clock)


class TestVerifyChain:
    def _raw(self, clock, n=10):
        log = AuditLog(None, clock)
        fill(log, n)
        return log.raw()

    def test_deleted_entry(self, clock):
        lines = self._raw(clock).splitlines(keepends=True)
        report = verify_chain(b"".join(lines[:4] + lines[5:]))
        assert not report.ok and report.first_bad_index == 4 and report.reason == "index_gap"

    def test_swapped_entries(self, clock):
        lines = self._raw(clock).splitlines(keepends=True)
        lines[2], lines[3] = lines[3], lines[2]
        report = verify_chain(b"".join(lines))
        assert not report.ok and report.first_bad_index == 2

    def test_rewritten_entry_with_fixed_hash(self, clock):
        # attacker recomputes the entry's own hash but cannot fix the successor's link
        lines = self._raw(clock).splitlines()
        rec = canonical_decode(lines[5])
        rec["details"] = {"asset_id": "a0", "i": 999}
        rec["detail_digest"] = digest_value(rec["details"])
        rec["entry_hash"] = entry_hash(rec)
        lines[5] = canonical_encode(rec)
        report = verify_chain(b"\n".join(lines) + b"\n")
        assert not report.ok and report.first_bad_index == 6 and report.reason == "link_mismatch"

    def test_detail_digest_checked(self, clock):
        lines = self._raw(clock).splitlines()
        rec = canonical_decode(lines[1])
        rec["details"] = {"tampered": True}
        rec["entry_hash"] = entry_hash(rec)
        lines[1] = canonical_encode(rec)
        report = verify_chain(b"\n".join(lines) + b"\n")
        assert report.first_bad_index == 1 and report.reason == "hash_mismatch"

    def test_non_canonical_line(self, clock):
        lines = self._raw(clock).splitlines()
        lines[3] = lines[3].replace(b'{"', b'{ "', 1)
        report = verify_chain(b"\n".join(lines) + b"\n")
        assert report.first_bad_index == 3 and report.reason == "malformed"

    def test_random_mutations_detected_at_or_before_entry(self, clock):
        raw = self._raw(clock, 30)
        ends = [i for i, b in enumerate(raw) if b == 0x0A]
        rng = random.Random(7)
        for _ in range(200):
            pos = rng.randrange(len(raw))
            data = bytearray(raw)
            data[pos] ^= rng.randrange(1, 256)
            entry = next(i for i, end in enumerate(ends) if pos <= end)
            report = verify_chain(bytes(data))
            assert not report.ok and report.first_bad_index <= entry


class TestQuery:
    def test_filters(self, clock):
        log = AuditLog(None, clock)
        fill(log, 12)
        assert [e.index for e in log.query(policy_id="p1")] == [1, 3, 5, 7, 9, 11]
        assert [e.index for e in log.query(asset_id="a2")] == [2, 5, 8, 11]
        assert [e.index for e in log.query(event_type="policy_registered")] == [0, 3, 6, 9]
        assert [e.index for e in log.query(actor_key_id=f"{1:064x}")] == [1, 5, 9]
        assert [e.index for e in log.query(AuditQuery(since_index=10))] == [10, 11]
        assert [e.index for e in log.query(policy_id="p0", asset_id="a0")] == [0, 6]
