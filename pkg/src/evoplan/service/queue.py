"""Pending-inspection queue: the single synchronization point for human review.

A run executor posts a review packet and blocks (with deadline) until an
operator resolves it through the API. Resolution is exactly-once: the first
valid submission wins, later attempts learn the entry was already resolved.
At most one inspection is pending per run at a time.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from ..core import EngineError
from ..stages import GradientSubmission, InspectionChannel, ReviewPacket


class QueueError(EngineError):
    pass


class UnknownInspectionError(QueueError):
    pass


class AlreadyResolvedError(QueueError):
    pass


class InvalidSubmissionError(QueueError):
    def __init__(self, errors: list[str]) -> None:
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class PendingInspection:
    packet: ReviewPacket
    deadline: float
    resolved: Optional[GradientSubmission] = None
    withdrawn: bool = False
    created_at: float = field(default_factory=time.time)

    @property
    def inspection_id(self) -> str:
        return self.packet.inspection_id

    @property
    def run_id(self) -> str:
        return self.packet.run_id

    def to_dict(self) -> dict:
        return {
            "inspection_id": self.inspection_id,
            "run_id": self.run_id,
            "packet": self.packet.to_dict(),
            "deadline": self.deadline,
            "created_at": self.created_at,
        }


class InspectionQueue(InspectionChannel):
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._resolved_cond = threading.Condition(self._lock)
        self._entries: dict[str, PendingInspection] = {}

    def post(self, packet: ReviewPacket, deadline: float) -> None:
        with self._lock:
            for entry in self._entries.values():
                if entry.run_id == packet.run_id and entry.resolved is None and not entry.withdrawn:
                    raise QueueError(f"run {packet.run_id} already has a pending inspection")
            self._entries[packet.inspection_id] = PendingInspection(packet, deadline)

    def pending(self) -> list[PendingInspection]:
        with self._lock:
            return [
                e for e in self._entries.values() if e.resolved is None and not e.withdrawn
            ]

    def get(self, inspection_id: str) -> Optional[PendingInspection]:
        with self._lock:
            return self._entries.get(inspection_id)

    def resolve(self, inspection_id: str, submission: GradientSubmission) -> None:
        """Attach a submission to a pending entry, exactly once.

        Invalid submissions are rejected and the entry stays pending, so an
        operator can correct and resubmit.
        """
        with self._resolved_cond:
            entry = self._entries.get(inspection_id)
            if entry is None or entry.withdrawn:
                raise UnknownInspectionError(f"no pending inspection {inspection_id}")
            if entry.resolved is not None:
                raise AlreadyResolvedError(f"inspection {inspection_id} already resolved")
            errors = submission.validation_errors(len(entry.packet.trace.steps))
            if errors:
                raise InvalidSubmissionError(errors)
            entry.resolved = submission
            self._resolved_cond.notify_all()

    def await_resolution(
        self, inspection_id: str, timeout: float
    ) -> Optional[GradientSubmission]:
        deadline = time.monotonic() + max(0.0, timeout)
        with self._resolved_cond:
            while True:
                entry = self._entries.get(inspection_id)
                if entry is None:
                    raise UnknownInspectionError(f"no inspection {inspection_id}")
                if entry.resolved is not None:
                    return entry.resolved
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._resolved_cond.wait(remaining)

    def withdraw(self, inspection_id: str) -> None:
        with self._lock:
            entry = self._entries.get(inspection_id)
            if entry is not None:
                entry.withdrawn = True
