"""Token-cost comparison between a method's runs and a baseline's runs.

For every case the method solved (goal score at or above the solved
threshold, default 0.7) with a matching baseline run for the same task and
backbone, the extra cost is billed(method) - billed(baseline). Per-backbone
values are the median of the per-case extras, and the headline number is the
median of those per-backbone medians, which keeps long-tail outliers from a
single backbone from dominating.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .store import Event, EventKind, RunRecord

SOLVED_THRESHOLD = 0.7


@dataclass(frozen=True)
class RunSummary:
    backbone: str
    task_id: str
    goal_score: Optional[float]
    billed_tokens: int

    @classmethod
    def from_events(cls, events: Sequence[Event], backbone: str = "") -> Optional["RunSummary"]:
        task_id = ""
        goal_score: Optional[float] = None
        billed = 0
        for event in events:
            if event.kind is EventKind.RUN_STARTED:
                task_id = event.payload.get("task", {}).get("id", "")
                backbone = backbone or event.payload.get("config", {}).get("backbone", "")
            elif event.kind is EventKind.RUN_FINISHED:
                goal_score = event.payload.get("goal_score")
                billed = int(event.payload.get("billed_tokens", 0))
        if not task_id:
            return None
        return cls(backbone=backbone, task_id=task_id, goal_score=goal_score, billed_tokens=billed)

    @classmethod
    def from_record(cls, record: RunRecord) -> Optional["RunSummary"]:
        return cls.from_events(record.events, backbone=record.config.backbone)


@dataclass(frozen=True)
class ExtraTokensResult:
    per_backbone: Mapping[str, float]
    aggregate: Optional[float]
    matched_cases: int

    def to_dict(self) -> dict:
        return {
            "per_backbone": dict(self.per_backbone),
            "aggregate": self.aggregate,
            "matched_cases": self.matched_cases,
        }


def extra_tokens(
    method_runs: Iterable[RunSummary],
    baseline_runs: Iterable[RunSummary],
    solved_threshold: float = SOLVED_THRESHOLD,
) -> ExtraTokensResult:
    """Median-of-medians extra billed tokens on solved, matched cases.

    Cases match on (backbone, task id); unmatched or unsolved cases are
    excluded. No matches is an empty result, not an error. Negative extras
    (method cheaper than baseline) are allowed.
    """
    baseline_index = {(r.backbone, r.task_id): r for r in baseline_runs}
    extras_by_backbone: dict[str, list[int]] = {}
    matched = 0
    for method_run in method_runs:
        if method_run.goal_score is None or method_run.goal_score < solved_threshold:
            continue
        baseline = baseline_index.get((method_run.backbone, method_run.task_id))
        if baseline is None:
            continue
        matched += 1
        extras_by_backbone.setdefault(method_run.backbone, []).append(
            method_run.billed_tokens - baseline.billed_tokens
        )
    per_backbone = {
        backbone: float(statistics.median(extras))
        for backbone, extras in sorted(extras_by_backbone.items())
    }
    aggregate = float(statistics.median(per_backbone.values())) if per_backbone else None
    return ExtraTokensResult(per_backbone=per_backbone, aggregate=aggregate, matched_cases=matched)
