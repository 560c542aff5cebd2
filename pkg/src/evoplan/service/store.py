"""Append-only run records: event schema, durable log files, crash recovery.

One run maps to one line-delimited JSON log file: a versioned header line
followed by one event per line. Appends are flushed and fsynced before the
sequence number is returned, and on reopen a partially written tail line is
truncated away, so a crash between write and ack loses at most the
unacknowledged event.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Optional

from ..core import EngineError, canonical_json

if TYPE_CHECKING:
    from ..loop import RunConfig

LOG_FORMAT = "run-events"
LOG_VERSION = 1


class StoreError(EngineError):
    pass


class TerminalRunError(StoreError):
    """Append attempted on a finished or failed run."""


class EventSchemaError(StoreError):
    """Event payload failed kind-specific validation."""


class RunStatus(str, Enum):
    RUNNING = "running"
    AWAITING_FEEDBACK = "awaiting_feedback"
    FINISHED = "finished"
    FAILED = "failed"


TERMINAL_STATUSES = frozenset({RunStatus.FINISHED, RunStatus.FAILED})


class EventKind(str, Enum):
    RUN_STARTED = "run_started"
    PLAN_GENERATED = "plan_generated"
    STEP_EXECUTED = "step_executed"
    INSPECTION = "inspection"
    GRADIENT = "gradient"
    EVOLUTION = "evolution"
    ACCEPTANCE_DECISION = "acceptance_decision"
    VERIFICATION = "verification"
    RUN_FINISHED = "run_finished"


REQUIRED_PAYLOAD_KEYS: dict[EventKind, frozenset[str]] = {
    EventKind.RUN_STARTED: frozenset({"task", "config"}),
    EventKind.PLAN_GENERATED: frozenset({"pool_index", "trajectory", "degenerate"}),
    EventKind.STEP_EXECUTED: frozenset({"phase", "step_index", "action", "outcome"}),
    EventKind.INSPECTION: frozenset({"phase", "loss", "severities", "trace_len"}),
    EventKind.GRADIENT: frozenset({"gradient", "computed_break_index"}),
    EventKind.EVOLUTION: frozenset(
        {"break_index", "respliced", "repeat_call_violation", "trajectory", "gradient"}
    ),
    EventKind.ACCEPTANCE_DECISION: frozenset(
        {"candidate_loss", "incumbent_loss", "accepted", "early_exit"}
    ),
    EventKind.VERIFICATION: frozenset({"report"}),
    EventKind.RUN_FINISHED: frozenset(
        {"status", "final_loss", "goal_score", "billed_tokens", "iterations"}
    ),
}


@dataclass(frozen=True)
class Event:
    seq: int
    kind: EventKind
    iteration: Optional[int]
    payload: Mapping[str, Any]
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "iteration": self.iteration,
            "payload": dict(self.payload),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Event":
        return cls(
            seq=int(data["seq"]),
            kind=EventKind(data["kind"]),
            iteration=data.get("iteration"),
            payload=dict(data["payload"]),
            wall_time=float(data["wall_time"]),
        )


def validate_event(event: Event) -> None:
    required = REQUIRED_PAYLOAD_KEYS.get(event.kind)
    if required is None:
        raise EventSchemaError(f"unknown event kind: {event.kind}")
    missing = required - set(event.payload)
    if missing:
        raise EventSchemaError(f"{event.kind.value} payload missing keys: {sorted(missing)}")


@dataclass
class RunRecord:
    run_id: str
    config: "RunConfig"
    events: list[Event] = field(default_factory=list)
    status: RunStatus = RunStatus.RUNNING


# ---------------------------------------------------------------------------
# durable log files


class EventLogWriter:
    """Append-only log for one run: header line, then one event per line."""

    def __init__(self, path: str | Path, run_id: str) -> None:
        self.path = Path(path)
        self.run_id = run_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        existing = recover_log(self.path) if self.path.exists() else None
        self._fh = open(self.path, "ab")
        if existing is None:
            header = canonical_json(
                {"format": LOG_FORMAT, "version": LOG_VERSION, "run_id": run_id}
            )
            self._write_line(header)
            self.next_seq = 0
        else:
            _, events = existing
            self.next_seq = events[-1].seq + 1 if events else 0

    def _write_line(self, line: str) -> None:
        self._fh.write(line.encode("utf-8") + b"\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, event: Event) -> int:
        if event.seq != self.next_seq:
            raise StoreError(f"expected seq {self.next_seq}, got {event.seq}")
        validate_event(event)
        self._write_line(canonical_json(event.to_dict()))
        self.next_seq += 1
        return event.seq

    def close(self) -> None:
        self._fh.close()


def recover_log(path: str | Path) -> tuple[dict, list[Event]]:
    """Parse a log file, truncating a partially written tail line.

    Returns (header, events). A final line that fails to parse is treated as
    a crash remnant and removed from the file.
    """
    path = Path(path)
    data = path.read_bytes()
    events: list[Event] = []
    header: Optional[dict] = None
    good_end = 0
    offset = 0
    while offset < len(data):
        newline = data.find(b"\n", offset)
        end = newline + 1 if newline != -1 else len(data)
        chunk = data[offset:end].strip()
        if chunk:
            try:
                record = json.loads(chunk.decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                break
            if header is None:
                if record.get("format") != LOG_FORMAT:
                    raise StoreError(f"not a run log: {path}")
                header = record
            else:
                events.append(Event.from_dict(record))
        good_end = end
        offset = end
    if header is None:
        raise StoreError(f"run log has no header: {path}")
    if good_end < len(data):
        with open(path, "r+b") as fh:
            fh.truncate(good_end)
    return header, events


def load_run_log(path: str | Path) -> tuple[dict, list[Event]]:
    """Read a run log without modifying it (raises on a corrupt tail)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise StoreError(f"empty run log: {path}")
    header = json.loads(lines[0])
    if header.get("format") != LOG_FORMAT:
        raise StoreError(f"not a run log: {path}")
    return header, [Event.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]


# ---------------------------------------------------------------------------
# in-process store with long-poll support


class RunStore:
    """Owns the run records and their log files; thread-safe."""

    def __init__(self, base_dir: str | Path) -> None:
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._runs: dict[str, RunRecord] = {}
        self._writers: dict[str, EventLogWriter] = {}

    def log_path(self, run_id: str) -> Path:
        return self.base_dir / f"{run_id}.jsonl"

    def create_run(self, run_id: str, config: "RunConfig") -> RunRecord:
        with self._lock:
            if run_id in self._runs:
                raise StoreError(f"run already exists: {run_id}")
            record = RunRecord(run_id=run_id, config=config)
            self._runs[run_id] = record
            self._writers[run_id] = EventLogWriter(self.log_path(run_id), run_id)
            return record

    def persist_event(self, run_id: str, event: Event) -> int:
        """Durably append one event; returns its sequence number."""
        with self._changed:
            record = self._require(run_id)
            if record.status in TERMINAL_STATUSES:
                raise TerminalRunError(f"run {run_id} is {record.status.value}")
            validate_event(event)
            seq = self._writers[run_id].append(event)
            record.events.append(event)
            if event.kind is EventKind.RUN_FINISHED:
                finished = event.payload.get("status") == "finished"
                record.status = RunStatus.FINISHED if finished else RunStatus.FAILED
            self._changed.notify_all()
            return seq

    def set_status(self, run_id: str, status: RunStatus) -> None:
        with self._changed:
            record = self._require(run_id)
            if record.status in TERMINAL_STATUSES:
                return
            record.status = status
            self._changed.notify_all()

    def get(self, run_id: str) -> Optional[RunRecord]:
        with self._lock:
            return self._runs.get(run_id)

    def run_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._runs)

    def events_since(self, run_id: str, since: int) -> list[Event]:
        with self._lock:
            record = self._require(run_id)
            return [e for e in record.events if e.seq > since]

    def wait_for_events(self, run_id: str, since: int, timeout: float) -> list[Event]:
        """Long-poll: block until events past `since` exist or the run ends."""
        deadline = time.monotonic() + timeout
        with self._changed:
            while True:
                record = self._require(run_id)
                fresh = [e for e in record.events if e.seq > since]
                if fresh or record.status in TERMINAL_STATUSES:
                    return fresh
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._changed.wait(remaining)

    def _require(self, run_id: str) -> RunRecord:
        record = self._runs.get(run_id)
        if record is None:
            raise StoreError(f"unknown run: {run_id}")
        return record


def iter_run_logs(directory: str | Path) -> Iterable[tuple[dict, list[Event]]]:
    for path in sorted(Path(directory).glob("*.jsonl")):
        yield load_run_log(path)
