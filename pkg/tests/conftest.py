from __future__ import annotations

import pytest

from evoplan.core import (
    Action,
    ActionKind,
    ExecutedStep,
    ExecutionTrace,
    ExpectedOutcome,
    Outcome,
    OutcomeStatus,
    Step,
    Task,
    Trajectory,
)


def reasoning_step(index: int, text: str = "think") -> Step:
    return Step(index=index, action=Action(ActionKind.REASONING, text=text))


def tool_step(index: int, tool: str = "query_entity", expect: str | None = None, **arguments) -> Step:
    expected = ExpectedOutcome(OutcomeStatus.OK, expect) if expect else None
    return Step(
        index=index,
        action=Action(ActionKind.TOOL_CALL, tool_name=tool, arguments=arguments),
        expected_outcome=expected,
    )


def final_step(index: int, text: str = "the answer") -> Step:
    return Step(index=index, action=Action(ActionKind.FINAL_ANSWER, text=text))


def executed(step: Step, status: OutcomeStatus = OutcomeStatus.OK, payload: str = "ok") -> ExecutedStep:
    return ExecutedStep(index=step.index, realized_action=step.action, outcome=Outcome(status, payload))


def trace_for(trajectory: Trajectory, statuses=None, payloads=None, early: bool = False) -> ExecutionTrace:
    """Realize a trajectory exactly as planned, with optional per-step outcomes."""
    steps = []
    for i, step in enumerate(trajectory.steps):
        status = statuses[i] if statuses else OutcomeStatus.OK
        payload = payloads[i] if payloads else "ok"
        steps.append(executed(step, status, payload))
    if early and steps:
        steps = steps[:-1]
    return ExecutionTrace(
        steps=tuple(steps),
        terminal_outcome=steps[-1].outcome if steps else None,
        terminated_early=early or len(steps) < len(trajectory.steps),
    )


@pytest.fixture
def simple_task() -> Task:
    return Task(id="t1", goal_text="do the thing")


@pytest.fixture
def four_step_trajectory() -> Trajectory:
    return Trajectory(
        steps=(
            reasoning_step(0),
            tool_step(1, tool="query_entity", expect="rating", **{"name": "X"}),
            tool_step(2, tool="book_entity", **{"name": "X", "day": 0}),
            final_step(3),
        )
    )
