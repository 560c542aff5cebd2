"""Persistence, metrics, HTTP API, and CLI for the refinement engine."""

from .metrics import ExtraTokensResult, RunSummary, extra_tokens
from .queue import InspectionQueue, PendingInspection
from .store import Event, EventKind, EventLogWriter, RunRecord, RunStatus, RunStore

__all__ = [
    "Event",
    "EventKind",
    "EventLogWriter",
    "ExtraTokensResult",
    "InspectionQueue",
    "PendingInspection",
    "RunRecord",
    "RunStatus",
    "RunStore",
    "RunSummary",
    "extra_tokens",
]
