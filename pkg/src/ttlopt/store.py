"""Append-only persistence of run artifacts with tamper-evident replay.

Every run owns a directory:

    <runs_root>/<run_id>/
        run.jsonl                 run-level records (hash-chained)
        sessions/<session_id>.jsonl   per-session records (each file chained)
        pool/<snapshot_n>.json    expert-pool snapshots
        report/                   selection report artifacts

Each .jsonl line is one record; records chain via sha256 so replay detects
tampering, and a partially written trailing line is truncated on reopen.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GENESIS_HASH = "0" * 64

RECORD_KINDS = frozenset(
    {
        "run_config",
        "episode_start",
        "step",
        "episode_end",
        "adapt",
        "proposal",
        "validation_result",
        "pool_update",
        "selection",
    }
)


class StoreError(Exception):
    pass


class SequenceError(StoreError):
    pass


class HashChainError(StoreError):
    """The chain does not verify; the log must not be trusted or resumed."""


def canonical_json(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def record_hash(prev_hash: str, seq: int, kind: str, payload: Mapping[str, object]) -> str:
    body = canonical_json({"seq": seq, "kind": kind, "payload": payload})
    return hashlib.sha256((prev_hash + body).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunLogRecord:
    seq: int
    ts: float
    kind: str
    payload: Mapping[str, object]
    hash: str


class JsonlLog:
    """One append-only, hash-chained JSONL file.

    Opening an existing file verifies the whole chain. A trailing line that
    is incomplete or unparseable is truncated and reported via
    ``recovered_corruption``; a broken hash or sequence gap in the intact
    body raises instead.
    """

    def __init__(self, path: str | Path, clock: Callable[[], float] = time.time):
        self.path = Path(path)
        self._clock = clock
        self.recovered_corruption = False
        self._records: list[RunLogRecord] = []
        self._last_hash = GENESIS_HASH
        if self.path.exists():
            self._load_existing()

    def _load_existing(self) -> None:
        raw = self.path.read_bytes()
        pos = 0
        keep = 0
        while pos < len(raw):
            newline = raw.find(b"\n", pos)
            if newline == -1:
                # Unterminated final line: an interrupted write.
                self.recovered_corruption = True
                break
            line = raw[pos:newline]
            record = self._parse_line(line)
            if record is None:
                if raw[newline + 1 :].strip():
                    raise HashChainError(
                        f"{self.path}: malformed record mid-file at byte {pos}"
                    )
                self.recovered_corruption = True
                break
            expected = record_hash(self._last_hash, record.seq, record.kind, record.payload)
            if record.hash != expected:
                raise HashChainError(f"{self.path}: hash mismatch at seq {record.seq}")
            if record.seq != len(self._records):
                raise SequenceError(
                    f"{self.path}: expected seq {len(self._records)}, found {record.seq}"
                )
            self._records.append(record)
            self._last_hash = record.hash
            pos = newline + 1
            keep = pos
        if self.recovered_corruption:
            logger.warning(
                "%s: truncating partial trailing write; %d intact records kept",
                self.path,
                len(self._records),
            )
            with open(self.path, "r+b") as fh:
                fh.truncate(keep)

    @staticmethod
    def _parse_line(line: bytes) -> RunLogRecord | None:
        try:
            body = json.loads(line.decode("utf-8"))
            return RunLogRecord(
                seq=int(body["seq"]),
                ts=float(body["ts"]),
                kind=str(body["kind"]),
                payload=body["payload"],
                hash=str(body["hash"]),
            )
        except (ValueError, KeyError, TypeError):
            return None

    @property
    def next_seq(self) -> int:
        return len(self._records)

    def records(self) -> list[RunLogRecord]:
        return list(self._records)

    def append(self, kind: str, payload: Mapping[str, object], seq: int | None = None) -> RunLogRecord:
        if kind not in RECORD_KINDS:
            raise StoreError(f"unknown record kind {kind!r}")
        if seq is None:
            seq = self.next_seq
        if seq != self.next_seq:
            raise SequenceError(f"{self.path}: expected seq {self.next_seq}, got {seq}")
        digest = record_hash(self._last_hash, seq, kind, payload)
        record = RunLogRecord(seq=seq, ts=self._clock(), kind=kind, payload=payload, hash=digest)
        line = canonical_json(
            {"seq": record.seq, "ts": record.ts, "kind": record.kind,
             "payload": record.payload, "hash": record.hash}
        )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._records.append(record)
        self._last_hash = record.hash
        return record


def verify_log(path: str | Path) -> list[RunLogRecord]:
    """Re-read a log from disk, raising HashChainError/SequenceError if the
    intact body does not verify."""
    return JsonlLog(path).records()


@dataclass
class ResumeState:
    pool_payload: Mapping[str, object] | None
    next_iteration: int
    init_done: bool
    selection_done: bool
    run_config: Mapping[str, object] | None
    iteration_payloads: dict[int, Mapping[str, object]]


class RunStore:
    """Owns one run directory; the single writer for its logs."""

    def __init__(self, runs_root: str | Path, run_id: str, clock: Callable[[], float] = time.time):
        self.run_id = run_id
        self.run_dir = Path(runs_root) / run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "sessions").mkdir(exist_ok=True)
        (self.run_dir / "pool").mkdir(exist_ok=True)
        (self.run_dir / "report").mkdir(exist_ok=True)
        self._clock = clock
        self.run_log = JsonlLog(self.run_dir / "run.jsonl", clock=clock)

    @property
    def report_dir(self) -> Path:
        return self.run_dir / "report"

    def session_log(self, session_id: str, fresh: bool = True) -> JsonlLog:
        path = self.run_dir / "sessions" / f"{session_id}.jsonl"
        if fresh and path.exists():
            # Deterministic replay of an interrupted iteration rewrites the file.
            path.unlink()
        return JsonlLog(path, clock=self._clock)

    def session_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.run_dir / "sessions").glob("*.jsonl"))

    def append(self, kind: str, payload: Mapping[str, object]) -> RunLogRecord:
        return self.run_log.append(kind, payload)

    def write_pool_snapshot(self, snapshot_index: int, payload: Mapping[str, object]) -> Path:
        path = self.run_dir / "pool" / f"snapshot_{snapshot_index:05d}.json"
        path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
        return path

    def read_pool_snapshot(self, snapshot_index: int) -> Mapping[str, object]:
        path = self.run_dir / "pool" / f"snapshot_{snapshot_index:05d}.json"
        return json.loads(path.read_text(encoding="utf-8"))

    def load_resume_point(self) -> ResumeState:
        """Reconstruct training state from the last complete iteration
        boundary; anything after it will be replayed from scratch."""
        run_config: Mapping[str, object] | None = None
        init_done = False
        selection_done = False
        last_snapshot: int | None = None
        boundary_snapshot: int | None = None
        iteration_payloads: dict[int, Mapping[str, object]] = {}
        for record in self.run_log.records():
            if record.kind == "run_config":
                run_config = record.payload
            elif record.kind == "pool_update":
                snap = record.payload.get("snapshot")
                if snap is not None:
                    last_snapshot = int(snap)
                if record.payload.get("phase") == "init":
                    init_done = True
                    boundary_snapshot = last_snapshot
            elif record.kind == "proposal":
                iteration_payloads[int(record.payload["iteration"])] = record.payload
                snap = record.payload.get("snapshot")
                if snap is not None:
                    boundary_snapshot = int(snap)
            elif record.kind == "selection":
                selection_done = True
        next_iteration = max(iteration_payloads) + 1 if iteration_payloads else 1
        pool_payload = None
        if boundary_snapshot is not None:
            pool_payload = self.read_pool_snapshot(boundary_snapshot)
        return ResumeState(
            pool_payload=pool_payload,
            next_iteration=next_iteration,
            init_done=init_done,
            selection_done=selection_done,
            run_config=run_config,
            iteration_payloads=iteration_payloads,
        )


class SessionRecorder:
    """Appends one session's lifecycle to its own chained log."""

    def __init__(
        self,
        log: JsonlLog,
        session_id: str,
        task_payload: Mapping[str, object],
        policy_id: str,
        tags: Iterable[str] = (),
        run_seed: int = 0,
    ):
        self.log = log
        self.session_id = session_id
        self._header = {
            "session_id": session_id,
            "policy_id": policy_id,
            "tags": list(tags),
            "run_seed": run_seed,
            **task_payload,
        }

    def episode_start(self, episode: int, actor_prompt: str, guidance: str) -> None:
        self.log.append(
            "episode_start",
            {**self._header, "episode": episode, "actor_prompt": actor_prompt,
             "guidance": guidance},
        )

    def step(self, episode: int, index: int, observation: str, action: str,
             reward: float, cumulative_return: float, calls_used: int = 1) -> None:
        self.log.append(
            "step",
            {"session_id": self.session_id, "episode": episode, "index": index,
             "observation": observation, "action": action, "reward": reward,
             "cumulative_return": cumulative_return, "calls_used": calls_used},
        )

    def episode_end(self, episode: int, episode_return: float, terminated: str,
                    note: str | None = None) -> None:
        payload = {"session_id": self.session_id, "episode": episode,
                   "return": episode_return, "terminated": terminated}
        if note:
            payload["note"] = note
        self.log.append("episode_end", payload)

    def adapt_event(self, episode: int, old_guidance: str, new_guidance: str,
                    calls_used: int) -> None:
        self.log.append(
            "adapt",
            {"session_id": self.session_id, "after_episode": episode,
             "old_guidance": old_guidance, "new_guidance": new_guidance,
             "calls_used": calls_used},
        )


class RunLock:
    """Exclusive-writer lock file for a run directory."""

    def __init__(self, run_dir: str | Path):
        self.path = Path(run_dir) / ".lock"
        self._fd: int | None = None

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise StoreError(
                f"run directory is locked by another writer: {self.path}"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc_info) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
