"""Task, trajectory, and execution-trace data model.

Everything here is an immutable value: trajectories are shared freely
between run executors and never mutated in place. Environments implement
the `Environment` interface and own all state; the engine only ever sees
opaque state digests.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional


class EngineError(Exception):
    """Base class for engine-raised errors."""


class IndexGapError(EngineError):
    """Appended step index does not continue the trajectory."""


class ExecutionHalt(EngineError):
    """Raised by an environment to abort execution of the remaining steps."""


# ---------------------------------------------------------------------------
# enums


class ActionKind(str, Enum):
    TOOL_CALL = "tool_call"
    REASONING = "reasoning"
    FINAL_ANSWER = "final_answer"


class OutcomeStatus(str, Enum):
    OK = "ok"
    TOOL_ERROR = "tool_error"
    INFEASIBLE = "infeasible"
    TIMEOUT = "timeout"


class ConstraintKind(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class ConstraintVerdict(str, Enum):
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    UNDECIDABLE = "undecidable"


class Provenance(str, Enum):
    PLANNED = "planned"
    EVOLVED = "evolved"


ANSWER_FORMATS = ("number", "string", "list")


# ---------------------------------------------------------------------------
# values


def canonical_json(data: Any) -> str:
    """Stable serialization used for digests and replay fixtures."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class TokenCount:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    @property
    def billed(self) -> int:
        return self.input_tokens + self.output_tokens

    def __add__(self, other: "TokenCount") -> "TokenCount":
        return TokenCount(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
        )

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TokenCount":
        return cls(int(data["input_tokens"]), int(data["output_tokens"]))


@dataclass(frozen=True)
class Action:
    """One agent decision: call a tool, think, or emit the final answer."""

    kind: ActionKind
    tool_name: Optional[str] = None
    arguments: Mapping[str, Any] = field(default_factory=dict)
    text: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind is ActionKind.TOOL_CALL:
            if not self.tool_name:
                raise ValueError("tool_call action requires tool_name")
        else:
            if self.text is None:
                raise ValueError(f"{self.kind.value} action requires text")
            if self.tool_name is not None:
                raise ValueError(f"{self.kind.value} action cannot carry tool_name")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "tool_name": self.tool_name,
            "arguments": dict(self.arguments),
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Action":
        return cls(
            kind=ActionKind(data["kind"]),
            tool_name=data.get("tool_name"),
            arguments=dict(data.get("arguments") or {}),
            text=data.get("text"),
        )


@dataclass(frozen=True)
class Outcome:
    """Environment response to one executed action."""

    status: OutcomeStatus
    payload: str = ""

    def __post_init__(self) -> None:
        if self.status is not OutcomeStatus.OK and not self.payload:
            raise ValueError("non-ok outcome must carry an error message payload")

    def to_dict(self) -> dict:
        return {"status": self.status.value, "payload": self.payload}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Outcome":
        return cls(OutcomeStatus(data["status"]), data.get("payload", ""))


@dataclass(frozen=True)
class ExpectedOutcome:
    """Plan-side success criterion for a step, checkable against the Outcome."""

    status: OutcomeStatus = OutcomeStatus.OK
    payload_contains: Optional[str] = None

    def met_by(self, outcome: Outcome) -> bool:
        if outcome.status is not self.status:
            return False
        if self.payload_contains is not None:
            return self.payload_contains in outcome.payload
        return True

    def to_dict(self) -> dict:
        return {"status": self.status.value, "payload_contains": self.payload_contains}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExpectedOutcome":
        return cls(OutcomeStatus(data["status"]), data.get("payload_contains"))


@dataclass(frozen=True)
class Step:
    """Planned step: position, action, and an optional success expectation."""

    index: int
    action: Action
    state_digest: str = ""
    expected_outcome: Optional[ExpectedOutcome] = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("step index must be non-negative")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "state_digest": self.state_digest,
            "action": self.action.to_dict(),
            "expected_outcome": self.expected_outcome.to_dict() if self.expected_outcome else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Step":
        expected = data.get("expected_outcome")
        return cls(
            index=int(data["index"]),
            action=Action.from_dict(data["action"]),
            state_digest=data.get("state_digest", ""),
            expected_outcome=ExpectedOutcome.from_dict(expected) if expected else None,
        )


@dataclass(frozen=True)
class Constraint:
    id: str
    kind: ConstraintKind
    predicate_ref: str
    description: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("constraint id must be nonempty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "predicate_ref": self.predicate_ref,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Constraint":
        return cls(
            id=data["id"],
            kind=ConstraintKind(data["kind"]),
            predicate_ref=data["predicate_ref"],
            description=data.get("description", ""),
        )


@dataclass(frozen=True)
class Attachment:
    filename: str
    payload: bytes

    def to_dict(self) -> dict:
        return {
            "filename": self.filename,
            "payload": base64.b64encode(self.payload).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Attachment":
        return cls(data["filename"], base64.b64decode(data["payload"]))


@dataclass(frozen=True)
class Task:
    id: str
    goal_text: str
    constraints: tuple[Constraint, ...] = ()
    attachments: tuple[Attachment, ...] = ()
    answer_format: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be nonempty")
        names = [a.filename for a in self.attachments]
        if len(names) != len(set(names)):
            raise ValueError("attachment filenames must be unique within a task")
        if self.answer_format is not None and self.answer_format not in ANSWER_FORMATS:
            raise ValueError(f"answer_format must be one of {ANSWER_FORMATS}")

    def attachment(self, filename: str) -> Optional[Attachment]:
        for att in self.attachments:
            if att.filename == filename:
                return att
        return None

    def hard_constraints(self) -> tuple[Constraint, ...]:
        return tuple(c for c in self.constraints if c.kind is ConstraintKind.HARD)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "goal_text": self.goal_text,
            "constraints": [c.to_dict() for c in self.constraints],
            "attachments": [a.to_dict() for a in self.attachments],
            "answer_format": self.answer_format,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Task":
        return cls(
            id=data["id"],
            goal_text=data["goal_text"],
            constraints=tuple(Constraint.from_dict(c) for c in data.get("constraints", [])),
            attachments=tuple(Attachment.from_dict(a) for a in data.get("attachments", [])),
            answer_format=data.get("answer_format"),
        )


@dataclass(frozen=True)
class Trajectory:
    """Planned step sequence. Evolved trajectories record the preserved prefix."""

    steps: tuple[Step, ...]
    provenance: Provenance = Provenance.PLANNED
    parent_iteration: Optional[int] = None
    preserved_prefix_len: Optional[int] = None
    plan_text: Optional[str] = None
    degenerate: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def final_answer_step(self) -> Optional[Step]:
        if self.steps and self.steps[-1].action.kind is ActionKind.FINAL_ANSWER:
            return self.steps[-1]
        return None

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "provenance": self.provenance.value,
            "parent_iteration": self.parent_iteration,
            "preserved_prefix_len": self.preserved_prefix_len,
            "plan_text": self.plan_text,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Trajectory":
        return cls(
            steps=tuple(Step.from_dict(s) for s in data["steps"]),
            provenance=Provenance(data.get("provenance", "planned")),
            parent_iteration=data.get("parent_iteration"),
            preserved_prefix_len=data.get("preserved_prefix_len"),
            plan_text=data.get("plan_text"),
            degenerate=data.get("degenerate", False),
        )


@dataclass(frozen=True)
class ExecutedStep:
    """Realized counterpart of a planned step.

    mismatch_severity stays 0 until the loss engine scores the trace.
    """

    index: int
    realized_action: Action
    outcome: Outcome
    mismatch_severity: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.mismatch_severity <= 1.0:
            raise ValueError("mismatch_severity must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "realized_action": self.realized_action.to_dict(),
            "outcome": self.outcome.to_dict(),
            "mismatch_severity": self.mismatch_severity,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExecutedStep":
        return cls(
            index=int(data["index"]),
            realized_action=Action.from_dict(data["realized_action"]),
            outcome=Outcome.from_dict(data["outcome"]),
            mismatch_severity=float(data.get("mismatch_severity", 0.0)),
        )


@dataclass(frozen=True)
class ExecutionTrace:
    steps: tuple[ExecutedStep, ...]
    terminal_outcome: Optional[Outcome]
    terminated_early: bool = False
    token_usage: TokenCount = TokenCount()

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.steps and self.terminal_outcome is None:
            raise ValueError("terminal_outcome required once any step executed")

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "terminal_outcome": self.terminal_outcome.to_dict() if self.terminal_outcome else None,
            "terminated_early": self.terminated_early,
            "token_usage": self.token_usage.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExecutionTrace":
        terminal = data.get("terminal_outcome")
        return cls(
            steps=tuple(ExecutedStep.from_dict(s) for s in data["steps"]),
            terminal_outcome=Outcome.from_dict(terminal) if terminal else None,
            terminated_early=data.get("terminated_early", False),
            token_usage=TokenCount.from_dict(data.get("token_usage") or {"input_tokens": 0, "output_tokens": 0}),
        )


# ---------------------------------------------------------------------------
# environment interface


class Environment:
    """Deterministic world the engine executes trajectories against.

    `step` must be deterministic given (state digest, action, seed), and
    `evaluate_goal` must be pure. Implementations may return None from
    `evaluate_goal` when goal scoring is delegated to a judge.
    """

    def reset(self, task: Task) -> str:
        raise NotImplementedError

    def step(self, state_digest: str, action: Action) -> tuple[str, Outcome]:
        raise NotImplementedError

    def evaluate_goal(self, trace: ExecutionTrace, task: Task) -> Optional[float]:
        raise NotImplementedError

    def check_constraint(self, constraint: Constraint, trace: ExecutionTrace) -> ConstraintVerdict:
        raise NotImplementedError


def execute_trajectory(trajectory: Trajectory, env: Environment, task: Task) -> ExecutionTrace:
    """Run every planned step through the environment, in order.

    The trace ends early only when the environment halts execution
    (`ExecutionHalt`); ordinary failures are recorded as outcomes and the
    remaining steps still run.
    """
    digest = env.reset(task)
    executed: list[ExecutedStep] = []
    terminated_early = False
    for step in trajectory.steps:
        try:
            digest, outcome = env.step(digest, step.action)
        except ExecutionHalt:
            terminated_early = True
            break
        executed.append(ExecutedStep(index=step.index, realized_action=step.action, outcome=outcome))
    terminal = executed[-1].outcome if executed else None
    return ExecutionTrace(
        steps=tuple(executed),
        terminal_outcome=terminal,
        terminated_early=terminated_early or len(executed) < len(trajectory.steps),
    )


# ---------------------------------------------------------------------------
# trajectory operations


def append_step(trajectory: Trajectory, step: Step) -> Trajectory:
    """Return a copy of `trajectory` with `step` appended.

    The step index must equal the current length; anything else raises
    IndexGapError so holes can never be built incrementally.
    """
    if step.index != len(trajectory.steps):
        raise IndexGapError(
            f"step index {step.index} does not extend trajectory of length {len(trajectory.steps)}"
        )
    return replace(trajectory, steps=trajectory.steps + (step,))


def shared_prefix_len(planned: Trajectory, trace: ExecutionTrace) -> int:
    """Length of the leading run of steps realized exactly as planned, all ok."""
    prefix = 0
    for planned_step, executed in zip(planned.steps, trace.steps):
        if executed.realized_action != planned_step.action:
            break
        if executed.outcome.status is not OutcomeStatus.OK:
            break
        prefix += 1
    return prefix


def validate(trajectory: Trajectory) -> list[str]:
    """Check trajectory invariants, returning violation descriptors.

    Violations are data, not errors: descriptors look like
    "duplicate-final-answer@3" so callers can log or assert on them.
    """
    violations: list[str] = []
    if not trajectory.steps:
        return ["empty-trajectory"]
    final_seen: Optional[int] = None
    last = len(trajectory.steps) - 1
    for position, step in enumerate(trajectory.steps):
        if step.index != position:
            violations.append(f"index-gap@{position}")
        if step.action.kind is ActionKind.FINAL_ANSWER:
            if final_seen is not None:
                violations.append(f"duplicate-final-answer@{position}")
            elif position != last:
                violations.append(f"final-answer-not-terminal@{position}")
            if final_seen is None:
                final_seen = position
    return violations


def digest_state(payload: Any, seed: int = 0) -> str:
    """Opaque, deterministic digest for environment state snapshots."""
    body = canonical_json({"seed": seed, "state": payload})
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def actions_equal(a: Action, b: Action) -> bool:
    """Exact (tool_name, arguments) equality used by repeat-call checks."""
    return (
        a.kind is b.kind
        and a.tool_name == b.tool_name
        and canonical_json(dict(a.arguments)) == canonical_json(dict(b.arguments))
        and a.text == b.text
    )


def iter_tool_calls(steps: Iterable[Step]) -> Iterable[Step]:
    for step in steps:
        if step.action.kind is ActionKind.TOOL_CALL:
            yield step
