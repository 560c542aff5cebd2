"""Trajectory loss: goal term, plan-execution divergence, and tool-call cost.

The loss of an executed trajectory decomposes into three parts:

  goal_loss   = 1 - G, where G in [0, 1] scores goal achievement
  divergence  = mean per-step mismatch severity, plus an early-termination
                penalty of 0.5, clamped to [0, 1]
  cost        = number of executed tool calls

Per-step mismatch severity is 1.0 for a hard break (realized action differs
from the plan, or the outcome status is an error), 0.5 for a soft break (the
action matched but a declared expectation was unmet), and 0 otherwise. The
divergence point i* is the first step whose severity reaches the threshold T;
because prefix divergence is the running max of severities, the first
crossing is exactly the minimal index over all prefixes.

Candidates are compared with a strict preference ordering: lexicographic on
(goal_loss, divergence, cost) by default, with small tolerances absorbing
floating-point noise, or a weighted-sum mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

from .core import (
    ActionKind,
    EngineError,
    Environment,
    ExecutionTrace,
    OutcomeStatus,
    Task,
    Trajectory,
)

DEFAULT_THRESHOLD = 0.5
HARD_SEVERITY = 1.0
SOFT_SEVERITY = 0.5
EARLY_TERMINATION_PENALTY = 0.5
DEFAULT_TOLERANCE = 1e-9


class ScoringError(EngineError):
    """Goal score missing or outside [0, 1]."""


class DomainError(EngineError):
    """Severity or threshold outside its legal range."""


class IncompatibleOrderingError(EngineError):
    """Breakdowns scored under different thresholds cannot be compared."""


@dataclass(frozen=True)
class LossBreakdown:
    goal_loss: float
    divergence: float
    cost: int
    threshold_used: float
    divergence_point: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "goal_loss": self.goal_loss,
            "divergence": self.divergence,
            "cost": self.cost,
            "threshold_used": self.threshold_used,
            "divergence_point": self.divergence_point,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossBreakdown":
        return cls(
            goal_loss=float(data["goal_loss"]),
            divergence=float(data["divergence"]),
            cost=int(data["cost"]),
            threshold_used=float(data["threshold_used"]),
            divergence_point=data.get("divergence_point"),
        )


class OrderingMode(str, Enum):
    LEXICOGRAPHIC = "lexicographic"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class LossOrdering:
    mode: OrderingMode = OrderingMode.LEXICOGRAPHIC
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tolerances: tuple[float, float] = (DEFAULT_TOLERANCE, DEFAULT_TOLERANCE)

    def __post_init__(self) -> None:
        if self.mode is OrderingMode.WEIGHTED and any(w <= 0 for w in self.weights):
            raise ValueError("weighted ordering requires strictly positive weights")
        if any(t < 0 for t in self.tolerances):
            raise ValueError("tolerances must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "weights": list(self.weights),
            "tolerances": list(self.tolerances),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossOrdering":
        return cls(
            mode=OrderingMode(data.get("mode", "lexicographic")),
            weights=tuple(data.get("weights", (1.0, 1.0, 1.0))),
            tolerances=tuple(data.get("tolerances", (DEFAULT_TOLERANCE, DEFAULT_TOLERANCE))),
        )


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold <= 1.0:
        raise DomainError(f"divergence threshold must be in (0, 1], got {threshold}")


def step_severities(planned: Trajectory, trace: ExecutionTrace) -> list[float]:
    """Per-step mismatch severity of the trace against its plan."""
    severities: list[float] = []
    for position, executed in enumerate(trace.steps):
        planned_step = planned.steps[position] if position < len(planned.steps) else None
        if planned_step is None or executed.realized_action != planned_step.action:
            severities.append(HARD_SEVERITY)
        elif executed.outcome.status is not OutcomeStatus.OK:
            severities.append(HARD_SEVERITY)
        elif planned_step.expected_outcome is not None and not planned_step.expected_outcome.met_by(
            executed.outcome
        ):
            severities.append(SOFT_SEVERITY)
        else:
            severities.append(0.0)
    return severities


def attach_severities(trace: ExecutionTrace, severities: Sequence[float]) -> ExecutionTrace:
    """Copy of the trace with mismatch severities filled in."""
    if len(severities) != len(trace.steps):
        raise DomainError("severity list length must match trace length")
    scored = tuple(
        replace(step, mismatch_severity=severity)
        for step, severity in zip(trace.steps, severities)
    )
    return replace(trace, steps=scored)


def locate_divergence(severities: Sequence[float], threshold: float) -> Optional[int]:
    """First index whose severity reaches the threshold, or None.

    Equivalent to the minimum over all prefixes of the max-severity crossing,
    since the prefix max first reaches T exactly where some element does.
    """
    _check_threshold(threshold)
    for index, severity in enumerate(severities):
        if not 0.0 <= severity <= 1.0:
            raise DomainError(f"severity out of [0, 1] at index {index}: {severity}")
        if severity >= threshold:
            return index
    return None


def divergence_score(severities: Sequence[float], terminated_early: bool) -> float:
    base = sum(severities) / len(severities) if severities else 0.0
    if terminated_early:
        base += EARLY_TERMINATION_PENALTY
    return max(0.0, min(1.0, base))


def score_trace(
    planned: Trajectory,
    trace: ExecutionTrace,
    env: Optional[Environment],
    task: Task,
    threshold: float = DEFAULT_THRESHOLD,
    goal_score: Optional[float] = None,
) -> LossBreakdown:
    """Score an executed trajectory against its plan.

    `goal_score` overrides the environment's goal evaluation; it is how
    judge- or human-supplied G values enter the loss. Without an override
    the environment must be able to score.
    """
    _check_threshold(threshold)
    if goal_score is None:
        if env is None:
            raise ScoringError("no environment and no goal override supplied")
        goal_score = env.evaluate_goal(trace, task)
        if goal_score is None:
            raise ScoringError("environment cannot score this task; supply a goal override")
    if not 0.0 <= goal_score <= 1.0:
        raise ScoringError(f"goal score outside [0, 1]: {goal_score}")
    severities = step_severities(planned, trace)
    cost = sum(1 for s in trace.steps if s.realized_action.kind is ActionKind.TOOL_CALL)
    return LossBreakdown(
        goal_loss=1.0 - goal_score,
        divergence=divergence_score(severities, trace.terminated_early),
        cost=cost,
        threshold_used=threshold,
        divergence_point=locate_divergence(severities, threshold),
    )


def prefer(a: LossBreakdown, b: LossBreakdown, ordering: LossOrdering) -> bool:
    """True iff `a` strictly improves on `b` under the ordering.

    Irreflexive and asymmetric by construction; equal breakdowns are never
    preferred, so ties are rejections.
    """
    if a.threshold_used != b.threshold_used:
        raise IncompatibleOrderingError(
            f"cannot compare breakdowns scored with T={a.threshold_used} and T={b.threshold_used}"
        )
    if ordering.mode is OrderingMode.WEIGHTED:
        w_goal, w_div, w_cost = ordering.weights
        total_a = w_goal * a.goal_loss + w_div * a.divergence + w_cost * a.cost
        total_b = w_goal * b.goal_loss + w_div * b.divergence + w_cost * b.cost
        return total_a < total_b
    eps_goal, eps_div = ordering.tolerances
    if a.goal_loss < b.goal_loss - eps_goal:
        return True
    if abs(a.goal_loss - b.goal_loss) <= eps_goal:
        if a.divergence < b.divergence - eps_div:
            return True
        if abs(a.divergence - b.divergence) <= eps_div:
            return a.cost < b.cost
    return False
