from __future__ import annotations

import json

import pytest

from ttlopt.store import (
    GENESIS_HASH,
    HashChainError,
    JsonlLog,
    RunLock,
    RunStore,
    SequenceError,
    StoreError,
    canonical_json,
    record_hash,
    verify_log,
)


def fixed_clock():
    return 123.0


class TestJsonlLog:
    def test_append_reopen_verify(self, tmp_path):
        path = tmp_path / "log.jsonl"
        log = JsonlLog(path, clock=fixed_clock)
        for i in range(3):
            log.append("step", {"i": i})
        reopened = JsonlLog(path)
        assert len(reopened.records()) == 3
        assert not reopened.recovered_corruption
        assert [r.payload["i"] for r in reopened.records()] == [0, 1, 2]

    def test_hashes_chain_from_genesis(self, tmp_path):
        log = JsonlLog(tmp_path / "log.jsonl", clock=fixed_clock)
        first = log.append("step", {"i": 0})
        second = log.append("step", {"i": 1})
        assert first.hash == record_hash(GENESIS_HASH, 0, "step", {"i": 0})
        assert second.hash == record_hash(first.hash, 1, "step", {"i": 1})

    def test_mid_record_truncation_recovers_intact_prefix(self, tmp_path):
        path = tmp_path / "log.jsonl"
        log = JsonlLog(path, clock=fixed_clock)
        for i in range(3):
            log.append("step", {"i": i})
        raw = path.read_bytes()
        # Cut into the middle of the third record.
        lines = raw.split(b"\n")
        damaged = b"\n".join(lines[:2]) + b"\n" + lines[2][: len(lines[2]) // 2]
        path.write_bytes(damaged)
        reopened = JsonlLog(path)
        assert reopened.recovered_corruption
        assert len(reopened.records()) == 2
        # The file is clean again and appendable.
        reopened.append("step", {"i": 99})
        assert len(verify_log(path)) == 3

    def test_out_of_order_sequence_rejected(self, tmp_path):
        log = JsonlLog(tmp_path / "log.jsonl", clock=fixed_clock)
        log.append("step", {"i": 0})
        with pytest.raises(SequenceError):
            log.append("step", {"i": 5}, seq=5)

    def test_tampered_payload_breaks_chain(self, tmp_path):
        path = tmp_path / "log.jsonl"
        log = JsonlLog(path, clock=fixed_clock)
        log.append("step", {"value": "honest"})
        log.append("step", {"value": "second"})
        lines = path.read_text().splitlines()
        tampered = json.loads(lines[0])
        tampered["payload"]["value"] = "forged"
        lines[0] = canonical_json(tampered)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(HashChainError):
            JsonlLog(path)

    def test_unknown_kind_rejected(self, tmp_path):
        log = JsonlLog(tmp_path / "log.jsonl", clock=fixed_clock)
        with pytest.raises(StoreError):
            log.append("surprise", {})

    def test_deterministic_bytes_with_fixed_clock(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for path in (a, b):
            log = JsonlLog(path, clock=lambda: 0.0)
            log.append("step", {"x": 1})
            log.append("adapt", {"y": [1, 2]})
        assert a.read_bytes() == b.read_bytes()


class TestRunStore:
    def test_directory_layout(self, tmp_path):
        store = RunStore(tmp_path, "run1", clock=fixed_clock)
        assert (store.run_dir / "sessions").is_dir()
        assert (store.run_dir / "pool").is_dir()
        assert (store.run_dir / "report").is_dir()
        store.append("run_config", {"schema_version": 1})
        assert (store.run_dir / "run.jsonl").exists()

    def test_pool_snapshot_round_trip(self, tmp_path):
        store = RunStore(tmp_path, "run1", clock=fixed_clock)
        payload = {"pool": {"entries": {}, "registry": {}}, "snapshot_index": 0,
                   "seed_scores": {}}
        store.write_pool_snapshot(0, payload)
        assert store.read_pool_snapshot(0) == payload

    def test_fresh_run_resume_state(self, tmp_path):
        store = RunStore(tmp_path, "fresh", clock=fixed_clock)
        state = store.load_resume_point()
        assert state.pool_payload is None
        assert state.next_iteration == 1
        assert not state.init_done and not state.selection_done

    def test_session_log_recreated_fresh(self, tmp_path):
        store = RunStore(tmp_path, "run1", clock=fixed_clock)
        log = store.session_log("s1")
        log.append("episode_start", {"episode": 1})
        log2 = store.session_log("s1")
        assert log2.records() == []

    def test_session_ids_sorted(self, tmp_path):
        store = RunStore(tmp_path, "run1", clock=fixed_clock)
        for sid in ("b", "a"):
            store.session_log(sid).append("episode_start", {"episode": 1})
        assert store.session_ids() == ["a", "b"]


class TestRunLock:
    def test_exclusive(self, tmp_path):
        with RunLock(tmp_path):
            with pytest.raises(StoreError):
                RunLock(tmp_path).__enter__()
        # Released: can lock again.
        with RunLock(tmp_path):
            pass

    def test_lock_removed_on_exit(self, tmp_path):
        lock = RunLock(tmp_path)
        with lock:
            assert lock.path.exists()
        assert not lock.path.exists()
