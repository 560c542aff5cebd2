"""The four refinement stages and the feedback providers that drive them.

plan() turns a task into an explicit step trajectory; inspect() scores an
execution trace and produces a structured textual gradient (from a human
reviewer, an autonomous judge model, or a deterministic heuristic); evolve()
rewrites the unsupported suffix of a plan while preserving the validated
prefix bit-exactly; verify() is the final gate that checks the complete
trajectory against every task requirement and repairs the final answer when
that is mechanically possible.

Plans are written in a small line grammar so they can round-trip through
model text:

    3. Look up the venue. [tool: query_entity {"name": "..."}] [expect: rating]
    6. [final] The answer text.

Numbered lines become steps in order; a [tool: ...] marker makes the step a
tool call, [expect: ...] declares what a successful result must contain, and
[final] marks the closing answer step.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

from .core import (
    Action,
    ActionKind,
    EngineError,
    Environment,
    ExecutionTrace,
    ExpectedOutcome,
    OutcomeStatus,
    Provenance,
    Step,
    Task,
    Trajectory,
    actions_equal,
    canonical_json,
    execute_trajectory,
)
from .gateway import GenerativeModel, ModelSession, TokenLedger
from .loss import LossBreakdown, attach_severities, score_trace, step_severities
from .prompts import stage_prompt

logger = logging.getLogger(__name__)

NONE_REPAIR = "none"

AGENT_PREAMBLE = (
    "You are a planning agent that solves tasks by composing tool calls into an "
    "explicit step plan.\n"
    "Write plans as numbered lines, one step per line. Annotate a step that calls "
    'a tool as [tool: <name> {"arg": "value"}] and optionally declare success with '
    "[expect: <text the result must contain>]. Mark the closing step with [final] "
    "followed by the answer text."
)


class PlanParseError(EngineError):
    """Model output contained no usable plan."""


class EvolveError(EngineError):
    """Plan revision could not produce a usable candidate."""


class VerifyPreconditionError(EngineError):
    """Verification requires a trajectory ending in a final answer."""


class JudgeParseError(EngineError):
    """Judge verdict could not be parsed after a retry."""


# ---------------------------------------------------------------------------
# textual gradients


class GradientSource(str, Enum):
    HITL = "hitl"
    JUDGE = "judge"
    HEURISTIC = "heuristic"


@dataclass(frozen=True)
class TextualGradient:
    """Structured discrepancy diagnosis: what broke, where, and how to repair it."""

    observed_failure: str
    downstream_manifestation: str
    earliest_break_index: int
    repair_instruction: str
    source: GradientSource

    def __post_init__(self) -> None:
        for name in ("observed_failure", "downstream_manifestation", "repair_instruction"):
            if not getattr(self, name).strip():
                raise ValueError(f"gradient field {name} must be nonempty")
        if self.earliest_break_index < 0:
            raise ValueError("earliest_break_index must be non-negative")

    def to_dict(self) -> dict:
        return {
            "observed_failure": self.observed_failure,
            "downstream_manifestation": self.downstream_manifestation,
            "earliest_break_index": self.earliest_break_index,
            "repair_instruction": self.repair_instruction,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TextualGradient":
        return cls(
            observed_failure=data["observed_failure"],
            downstream_manifestation=data["downstream_manifestation"],
            earliest_break_index=int(data["earliest_break_index"]),
            repair_instruction=data["repair_instruction"],
            source=GradientSource(data["source"]),
        )


def none_gradient() -> TextualGradient:
    """Sentinel gradient for traces with nothing to repair."""
    return TextualGradient(
        observed_failure=NONE_REPAIR,
        downstream_manifestation=NONE_REPAIR,
        earliest_break_index=0,
        repair_instruction=NONE_REPAIR,
        source=GradientSource.HEURISTIC,
    )


def clamp_break_index(index: int, trace_len: int) -> int:
    return max(0, min(index, max(0, trace_len - 1)))


# ---------------------------------------------------------------------------
# review packets and submissions (shared with the HTTP API)


@dataclass(frozen=True)
class GradientSubmission:
    observed_failure: str
    downstream_manifestation: str
    earliest_break_index: int
    repair_instruction: str
    goal_score: Optional[float] = None

    def validation_errors(self, trace_len: int) -> list[str]:
        errors = []
        for name in ("observed_failure", "downstream_manifestation", "repair_instruction"):
            if not getattr(self, name).strip():
                errors.append(f"{name} must be nonempty")
        upper = max(0, trace_len - 1)
        if not 0 <= self.earliest_break_index <= upper:
            errors.append(f"earliest_break_index must be in [0, {upper}]")
        if self.goal_score is not None and not 0.0 <= self.goal_score <= 1.0:
            errors.append("goal_score must be in [0, 1]")
        return errors

    def to_gradient(self) -> TextualGradient:
        return TextualGradient(
            observed_failure=self.observed_failure,
            downstream_manifestation=self.downstream_manifestation,
            earliest_break_index=self.earliest_break_index,
            repair_instruction=self.repair_instruction,
            source=GradientSource.HITL,
        )


@dataclass(frozen=True)
class ReviewPacket:
    """Everything a human reviewer needs to diagnose one inspection."""

    inspection_id: str
    run_id: str
    task: Task
    planned: Trajectory
    trace: ExecutionTrace  # severities already attached
    loss: LossBreakdown
    computed_break_index: Optional[int]
    constraint_verdicts: Optional[Mapping[str, str]] = None  # id -> satisfied/violated/undecidable

    def to_dict(self) -> dict:
        return {
            "inspection_id": self.inspection_id,
            "run_id": self.run_id,
            "task": self.task.to_dict(),
            "planned": self.planned.to_dict(),
            "trace": self.trace.to_dict(),
            "loss": self.loss.to_dict(),
            "computed_break_index": self.computed_break_index,
            "constraint_verdicts": dict(self.constraint_verdicts) if self.constraint_verdicts else None,
        }


# ---------------------------------------------------------------------------
# feedback providers


class FeedbackProvider:
    """Produces goal scores and textual gradients for inspected traces."""

    def diagnose(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> TextualGradient:
        raise NotImplementedError

    def judge_goal(self, task: Task, trace: ExecutionTrace) -> float:
        raise NotImplementedError

    def diagnose_full(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> tuple[TextualGradient, Optional[float]]:
        """diagnose() plus an optional goal override (used by human review)."""
        return self.diagnose(task, planned, trace, loss), None


def _describe_action(action: Action) -> str:
    if action.kind is ActionKind.TOOL_CALL:
        return f"{action.tool_name}({canonical_json(dict(action.arguments))})"
    return action.kind.value


class HeuristicFeedbackProvider(FeedbackProvider):
    """Deterministic gradient built from the computed divergence point.

    Used when inspection is disabled and as the last-resort fallback for
    unparseable judge verdicts. judge_goal is conservatively 0 because the
    heuristic has no way to evaluate the goal.
    """

    def diagnose(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> TextualGradient:
        index = loss.divergence_point
        if index is None:
            index = clamp_break_index(len(trace.steps) - 1, len(trace.steps))
        failing = trace.steps[index] if index < len(trace.steps) else None
        if loss.goal_loss > 0:
            observed = f"final outcome scored {1.0 - loss.goal_loss:.3f} against the goal"
        else:
            observed = "execution diverged from the plan"
        if failing is not None and failing.outcome.payload:
            manifestation = f"step {index} returned: {failing.outcome.payload[:200]}"
        elif trace.terminated_early:
            manifestation = "execution ended before the plan completed"
        else:
            manifestation = f"step {index} did not support the remaining plan"
        culprit = _describe_action(failing.realized_action) if failing else "the failing step"
        repair = (
            f"Rework the plan from step {index}: take a different approach than "
            f"{culprit} and do not repeat the same call."
        )
        return TextualGradient(
            observed_failure=observed,
            downstream_manifestation=manifestation,
            earliest_break_index=clamp_break_index(index, len(trace.steps)),
            repair_instruction=repair,
            source=GradientSource.HEURISTIC,
        )

    def judge_goal(self, task: Task, trace: ExecutionTrace) -> float:
        return 0.0


JUDGE_SYSTEM = (
    "You are a strict evaluator of agent executions. You receive a task, the "
    "agent's step plan, and the executed trace with per-step outcomes. Respond "
    "with a single JSON object and nothing else:\n"
    '{"goal_score": <float 0..1>, "observed_failure": <string>, '
    '"downstream_manifestation": <string>, "earliest_break_index": <int>, '
    '"repair_instruction": <string>}'
)

GOAL_ONLY_SYSTEM = (
    "You are a strict evaluator of agent executions. Score how well the final "
    "outcome satisfies the task goal. Respond with a single JSON object and "
    'nothing else: {"goal_score": <float 0..1>}'
)

_JSON_FENCE = re.compile(r"```(?:json)?\s*\n(.*?)\n\s*```", re.DOTALL)


def extract_json_object(text: str) -> Optional[dict]:
    """Pull the first JSON object out of model text, fenced or bare."""
    fenced = _JSON_FENCE.search(text)
    if fenced:
        text = fenced.group(1)
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = json.JSONDecoder().raw_decode(text[start:])
        except ValueError:
            start = text.find("{", start + 1)
            continue
        if isinstance(obj, dict):
            return obj
        start = text.find("{", start + 1)
    return None


def render_trace(trace: ExecutionTrace, limit: int = 300) -> str:
    lines = []
    for step in trace.steps:
        payload = step.outcome.payload[:limit]
        lines.append(
            f"step {step.index}: {_describe_action(step.realized_action)} -> "
            f"{step.outcome.status.value}: {payload}"
        )
    if trace.terminated_early:
        lines.append("(execution ended before the plan completed)")
    return "\n".join(lines)


def task_brief(task: Task) -> str:
    parts = [f"Task: {task.goal_text}"]
    if task.constraints:
        parts.append("Requirements:")
        parts.extend(f"- {c.id} ({c.kind.value}): {c.description}" for c in task.constraints)
    if task.answer_format:
        parts.append(f"Answer format: {task.answer_format}")
    if task.attachments:
        names = ", ".join(a.filename for a in task.attachments)
        parts.append(f"Attachments: {names}")
    return "\n".join(parts)


class JudgeFeedbackProvider(FeedbackProvider):
    """Autonomous judge: one model call returning a structured verdict.

    Unparseable verdicts are retried once with a format reminder, then mapped
    to the deterministic heuristic gradient.
    """

    def __init__(self, model: GenerativeModel, ledger: Optional[TokenLedger] = None) -> None:
        self.model = model
        self.ledger = ledger
        self._heuristic = HeuristicFeedbackProvider()

    def _send(self, session: ModelSession, messages: list[dict]) -> str:
        turn = session.send(messages)
        if self.ledger is not None:
            self.ledger.add(session.usage())
        return turn.text or ""

    def diagnose(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> TextualGradient:
        session = self.model.start_session(JUDGE_SYSTEM)
        user = "\n\n".join(
            [
                task_brief(task),
                "Plan:\n" + render_steps(planned.steps),
                "Executed trace:\n" + render_trace(trace),
                f"Computed loss: goal_loss={loss.goal_loss:.3f} divergence={loss.divergence:.3f} "
                f"cost={loss.cost} divergence_point={loss.divergence_point}",
            ]
        )
        messages = [{"role": "user", "content": user}]
        text = self._send(session, messages)
        verdict = self._parse_verdict(text)
        if verdict is None:
            messages = messages + [
                {"role": "assistant", "content": text},
                {"role": "user", "content": "Return only the JSON verdict object, no prose."},
            ]
            verdict = self._parse_verdict(self._send(session, messages))
        if verdict is None:
            logger.warning("judge verdict unparseable twice; using heuristic gradient")
            return self._heuristic.diagnose(task, planned, trace, loss)
        return TextualGradient(
            observed_failure=str(verdict["observed_failure"]),
            downstream_manifestation=str(verdict["downstream_manifestation"]),
            earliest_break_index=clamp_break_index(
                int(verdict["earliest_break_index"]), len(trace.steps)
            ),
            repair_instruction=str(verdict["repair_instruction"]),
            source=GradientSource.JUDGE,
        )

    @staticmethod
    def _parse_verdict(text: str) -> Optional[dict]:
        obj = extract_json_object(text)
        if obj is None:
            return None
        required = (
            "observed_failure",
            "downstream_manifestation",
            "earliest_break_index",
            "repair_instruction",
        )
        if not all(key in obj for key in required):
            return None
        try:
            int(obj["earliest_break_index"])
        except (TypeError, ValueError):
            return None
        return obj

    def judge_goal(self, task: Task, trace: ExecutionTrace) -> float:
        session = self.model.start_session(GOAL_ONLY_SYSTEM)
        user = task_brief(task) + "\n\nExecuted trace:\n" + render_trace(trace)
        messages = [{"role": "user", "content": user}]
        for attempt in range(2):
            text = self._send(session, messages)
            obj = extract_json_object(text)
            if obj is not None and "goal_score" in obj:
                try:
                    score = float(obj["goal_score"])
                except (TypeError, ValueError):
                    score = None
                if score is not None and 0.0 <= score <= 1.0:
                    return score
            messages = messages + [
                {"role": "assistant", "content": text},
                {"role": "user", "content": 'Return only {"goal_score": <float 0..1>}.'},
            ]
        raise JudgeParseError("judge goal verdict unparseable after retry")


class InspectionChannel:
    """Where pending human reviews are posted and awaited (the service queue)."""

    def post(self, packet: ReviewPacket, deadline: float) -> None:
        raise NotImplementedError

    def await_resolution(self, inspection_id: str, timeout: float) -> Optional[GradientSubmission]:
        raise NotImplementedError

    def withdraw(self, inspection_id: str) -> None:
        raise NotImplementedError


class HitlFeedbackProvider(FeedbackProvider):
    """Blocking human review: posts a packet and waits for the submission.

    When the feedback deadline elapses the provider withdraws the packet and
    falls back to the autonomous judge, so absent reviewers never wedge a
    run. The fallback is logged and visible in the gradient source.
    """

    def __init__(
        self,
        channel: InspectionChannel,
        run_id: str,
        fallback: FeedbackProvider,
        timeout: float = 900.0,
        on_wait: Optional[Callable[[], None]] = None,
        on_resume: Optional[Callable[[], None]] = None,
        constraint_checker: Optional[Callable[[Task, ExecutionTrace], Mapping[str, str]]] = None,
    ) -> None:
        self.channel = channel
        self.run_id = run_id
        self.fallback = fallback
        self.timeout = timeout
        self.on_wait = on_wait
        self.on_resume = on_resume
        self.constraint_checker = constraint_checker
        self._counter = 0

    def _next_id(self) -> str:
        self._counter += 1
        return f"{self.run_id}-insp-{self._counter}"

    def diagnose(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> TextualGradient:
        return self.diagnose_full(task, planned, trace, loss)[0]

    def diagnose_full(
        self, task: Task, planned: Trajectory, trace: ExecutionTrace, loss: LossBreakdown
    ) -> tuple[TextualGradient, Optional[float]]:
        verdicts = self.constraint_checker(task, trace) if self.constraint_checker else None
        packet = ReviewPacket(
            inspection_id=self._next_id(),
            run_id=self.run_id,
            task=task,
            planned=planned,
            trace=attach_severities(trace, step_severities(planned, trace)),
            loss=loss,
            computed_break_index=loss.divergence_point,
            constraint_verdicts=verdicts,
        )
        self.channel.post(packet, deadline=time.time() + self.timeout)
        if self.on_wait:
            self.on_wait()
        try:
            submission = self.channel.await_resolution(packet.inspection_id, self.timeout)
        finally:
            if self.on_resume:
                self.on_resume()
        if submission is None:
            self.channel.withdraw(packet.inspection_id)
            logger.warning(
                "inspection %s timed out after %.1fs; falling back to judge",
                packet.inspection_id,
                self.timeout,
            )
            return self.fallback.diagnose(task, planned, trace, loss), None
        return submission.to_gradient(), submission.goal_score

    def judge_goal(self, task: Task, trace: ExecutionTrace) -> float:
        return self.fallback.judge_goal(task, trace)


# ---------------------------------------------------------------------------
# stage configuration


class Regime(str, Enum):
    HITL = "hitl"
    AUTO = "auto"


STAGE_NAMES = ("plan", "inspect", "evolve", "verify")


def _all_stages_on() -> dict:
    return {name: True for name in STAGE_NAMES}


@dataclass(frozen=True)
class StageConfig:
    enabled: Mapping[str, bool] = field(default_factory=_all_stages_on)
    inspect_interval: int = 3
    evolve_cap: int = 3
    regime: Regime = Regime.AUTO

    def __post_init__(self) -> None:
        unknown = set(self.enabled) - set(STAGE_NAMES)
        if unknown:
            raise ValueError(f"unknown stage names: {sorted(unknown)}")
        if self.inspect_interval < 1:
            raise ValueError("inspect_interval must be >= 1")
        if self.evolve_cap < 0:
            raise ValueError("evolve_cap must be >= 0")

    def is_enabled(self, stage: str) -> bool:
        return self.enabled.get(stage, True)

    def with_disabled(self, *stages: str) -> "StageConfig":
        enabled = dict(self.enabled)
        for stage in stages:
            if stage not in STAGE_NAMES:
                raise ValueError(f"unknown stage: {stage}")
            enabled[stage] = False
        return replace(self, enabled=enabled)

    def to_dict(self) -> dict:
        return {
            "enabled": {name: self.is_enabled(name) for name in STAGE_NAMES},
            "inspect_interval": self.inspect_interval,
            "evolve_cap": self.evolve_cap,
            "regime": self.regime.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StageConfig":
        return cls(
            enabled=dict(data.get("enabled", _all_stages_on())),
            inspect_interval=data.get("inspect_interval", 3),
            evolve_cap=data.get("evolve_cap", 3),
            regime=Regime(data.get("regime", "auto")),
        )


# ---------------------------------------------------------------------------
# plan grammar

_STEP_LINE = re.compile(r"^\s*\d+[.)]\s+(.*)$")
_EXPECT_MARK = re.compile(r"\[expect:\s*([^\]]+)\]")
_PLAN_BLOCK = re.compile(r"<plan>(.*?)</plan>", re.DOTALL | re.IGNORECASE)
_FINAL_MARK = "[final]"
_TOOL_PREFIX = re.compile(r"\[tool:\s*([A-Za-z_][\w-]*)\s*")


def _parse_tool_marker(text: str) -> tuple[Optional[tuple[str, dict]], str]:
    """Extract one [tool: name {...}] marker; returns ((name, args), cleaned text)."""
    match = _TOOL_PREFIX.search(text)
    if not match:
        return None, text
    brace = text.find("{", match.end() - 1)
    if brace == -1:
        return None, text
    try:
        args, consumed = json.JSONDecoder().raw_decode(text[brace:])
    except ValueError:
        return None, text
    tail = text[brace + consumed :]
    closing = tail.find("]")
    if closing == -1 or tail[:closing].strip():
        return None, text
    cleaned = text[: match.start()] + tail[closing + 1 :]
    if not isinstance(args, dict):
        return None, text
    return (match.group(1), args), cleaned


def parse_steps(text: str) -> list[Step]:
    """Parse numbered plan lines into steps (indices assigned by order)."""
    steps: list[Step] = []
    for raw_line in text.splitlines():
        line_match = _STEP_LINE.match(raw_line)
        if not line_match:
            continue
        body = line_match.group(1)
        expected: Optional[ExpectedOutcome] = None
        expect_match = _EXPECT_MARK.search(body)
        if expect_match:
            expected = ExpectedOutcome(OutcomeStatus.OK, expect_match.group(1).strip())
            body = body[: expect_match.start()] + body[expect_match.end() :]
        tool, body = _parse_tool_marker(body)
        is_final = _FINAL_MARK in body
        if is_final:
            body = body.replace(_FINAL_MARK, "")
        body = body.strip()
        index = len(steps)
        if tool is not None:
            action = Action(ActionKind.TOOL_CALL, tool_name=tool[0], arguments=tool[1])
        elif is_final:
            action = Action(ActionKind.FINAL_ANSWER, text=body)
        else:
            action = Action(ActionKind.REASONING, text=body)
        steps.append(Step(index=index, action=action, expected_outcome=expected))
    return steps


def render_steps(steps: Sequence[Step]) -> str:
    """Inverse of parse_steps, up to cosmetic prose on tool lines."""
    lines = []
    for step in steps:
        action = step.action
        if action.kind is ActionKind.TOOL_CALL:
            body = f"[tool: {action.tool_name} {canonical_json(dict(action.arguments))}]"
        elif action.kind is ActionKind.FINAL_ANSWER:
            body = f"{_FINAL_MARK} {action.text}".strip()
        else:
            body = action.text or ""
        if step.expected_outcome is not None and step.expected_outcome.payload_contains:
            body += f" [expect: {step.expected_outcome.payload_contains}]"
        lines.append(f"{step.index + 1}. {body}")
    return "\n".join(lines)


def extract_plan_block(text: str) -> Optional[str]:
    match = _PLAN_BLOCK.search(text)
    return match.group(1) if match else None


# ---------------------------------------------------------------------------
# stages


def _degenerate(text: str) -> Trajectory:
    return Trajectory(
        steps=(Step(0, Action(ActionKind.FINAL_ANSWER, text=text)),),
        provenance=Provenance.PLANNED,
        plan_text=text,
        degenerate=True,
    )


def plan(task: Task, model: GenerativeModel, ledger: Optional[TokenLedger] = None) -> Trajectory:
    """Generate one candidate trajectory with the upfront planning prompt.

    The plan text is kept verbatim on the trajectory for the run log. When
    no <plan> block can be parsed a degenerate single-step trajectory is
    returned, flagged, with the raw text as its final answer.
    """
    system = AGENT_PREAMBLE + "\n\n" + stage_prompt("plan")
    session = model.start_session(system)
    turn = session.send([{"role": "user", "content": task_brief(task)}])
    if ledger is not None:
        ledger.add(session.usage())
    text = turn.text or ""
    block = extract_plan_block(text)
    if block is None:
        return _degenerate(text)
    steps = parse_steps(block)
    if not steps:
        return _degenerate(text)
    return Trajectory(steps=tuple(steps), provenance=Provenance.PLANNED, plan_text=text)


def direct_generate(
    task: Task, model: GenerativeModel, ledger: Optional[TokenLedger] = None
) -> Trajectory:
    """Single-pass generation without the planning prompt (baseline mode)."""
    session = model.start_session(AGENT_PREAMBLE)
    turn = session.send([{"role": "user", "content": task_brief(task)}])
    if ledger is not None:
        ledger.add(session.usage())
    text = turn.text or ""
    block = extract_plan_block(text)
    steps = parse_steps(block if block is not None else text)
    if not steps:
        return Trajectory(
            steps=(Step(0, Action(ActionKind.FINAL_ANSWER, text=text)),),
            provenance=Provenance.PLANNED,
            plan_text=text,
        )
    return Trajectory(steps=tuple(steps), provenance=Provenance.PLANNED, plan_text=text)


def inspect(
    task: Task,
    planned: Trajectory,
    trace: ExecutionTrace,
    provider: FeedbackProvider,
    env: Optional[Environment],
    threshold: float,
    need_gradient: bool = True,
    ledger: Optional[TokenLedger] = None,
) -> tuple[LossBreakdown, TextualGradient]:
    """Score a trace and obtain its textual gradient.

    The goal score comes from the environment when it can score, otherwise
    from the provider's judge. A perfect trace short-circuits to the "none"
    sentinel without consulting the provider. With need_gradient=False only
    the loss matters (candidate evaluation discards the gradient), so the
    provider is not consulted and a heuristic gradient is returned.

    The gradient's break index defaults to the computed divergence point and
    may be overridden by the provider; the loss always keeps the computed
    value, so both stay distinguishable in the logs.
    """
    goal = env.evaluate_goal(trace, task) if env is not None else None
    if goal is None:
        goal = provider.judge_goal(task, trace)
    breakdown = score_trace(planned, trace, None, task, threshold, goal_score=goal)
    if breakdown.goal_loss == 0.0 and breakdown.divergence == 0.0:
        return breakdown, none_gradient()
    heuristic = HeuristicFeedbackProvider()
    if not need_gradient:
        return breakdown, heuristic.diagnose(task, planned, trace, breakdown)
    gradient, goal_override = provider.diagnose_full(task, planned, trace, breakdown)
    if goal_override is not None and goal_override != goal:
        breakdown = score_trace(planned, trace, None, task, threshold, goal_score=goal_override)
    bounded = clamp_break_index(gradient.earliest_break_index, len(trace.steps))
    if bounded != gradient.earliest_break_index:
        gradient = replace(gradient, earliest_break_index=bounded)
    return breakdown, gradient


@dataclass(frozen=True)
class EvolveReport:
    break_index: int
    respliced: bool
    repeat_call_violation: bool

    def to_dict(self) -> dict:
        return {
            "break_index": self.break_index,
            "respliced": self.respliced,
            "repeat_call_violation": self.repeat_call_violation,
        }


def evolve(
    planned: Trajectory,
    trace: ExecutionTrace,
    gradient: TextualGradient,
    model: GenerativeModel,
    iteration: Optional[int] = None,
    ledger: Optional[TokenLedger] = None,
) -> tuple[Trajectory, EvolveReport]:
    """Rewrite the unsupported suffix of a plan, preserving the prefix.

    Steps before the gradient's break index are preserved bit-exactly. If
    the model's revision tampers with them, the engine re-splices the true
    prefix mechanically and notes it. A revised tool call that repeats the
    exact (tool, arguments) pair of the broken step is flagged as a
    repeat-call violation; the candidate still goes to acceptance, where a
    literal retry has to earn its keep.
    """
    break_index = gradient.earliest_break_index
    if break_index >= len(planned.steps):
        raise EvolveError(
            f"break index {break_index} outside plan of length {len(planned.steps)}"
        )
    prefix = planned.steps[:break_index]
    break_step = planned.steps[break_index]
    system = AGENT_PREAMBLE + "\n\n" + stage_prompt("evolve")
    user = "\n\n".join(
        [
            "Current plan:\n" + render_steps(planned.steps),
            "Execution results:\n" + render_trace(trace),
            "Diagnosis:\n"
            f"- Observed failure: {gradient.observed_failure}\n"
            f"- Downstream manifestation: {gradient.downstream_manifestation}\n"
            f"- Earliest break: step {break_index}\n"
            f"- Repair instruction: {gradient.repair_instruction}",
            f"Rewrite the plan from step {break_index + 1} on. Keep steps 1..{break_index} "
            "exactly as written. Output the complete revised plan inside <plan>...</plan> tags.",
        ]
    )
    session = model.start_session(system)
    turn = session.send([{"role": "user", "content": user}])
    if ledger is not None:
        ledger.add(session.usage())
    text = turn.text or ""
    block = extract_plan_block(text)
    steps = parse_steps(block if block is not None else text)
    if not steps:
        raise EvolveError("revision contained no parseable plan")
    respliced = False
    if tuple(steps[:break_index]) != prefix:
        suffix = steps[break_index:]
        if not suffix:
            raise EvolveError("revision contained no usable suffix after the break index")
        respliced = True
        steps = list(prefix) + [
            Step(
                index=break_index + offset,
                action=s.action,
                expected_outcome=s.expected_outcome,
            )
            for offset, s in enumerate(suffix)
        ]
    repeat = False
    if break_step.action.kind is ActionKind.TOOL_CALL:
        repeat = any(
            s.action.kind is ActionKind.TOOL_CALL and actions_equal(s.action, break_step.action)
            for s in steps[break_index:]
        )
        if repeat:
            logger.warning("revision repeats the broken call at step %d", break_index)
    candidate = Trajectory(
        steps=tuple(steps),
        provenance=Provenance.EVOLVED,
        parent_iteration=iteration,
        preserved_prefix_len=break_index,
        plan_text=text,
    )
    return candidate, EvolveReport(break_index, respliced, repeat)


# ---------------------------------------------------------------------------
# verification


@dataclass(frozen=True)
class RequirementVerdict:
    requirement_id: str
    description: str
    satisfied: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "requirement_id": self.requirement_id,
            "description": self.description,
            "satisfied": self.satisfied,
            "note": self.note,
        }


@dataclass(frozen=True)
class VerificationReport:
    items: tuple[RequirementVerdict, ...]
    repaired: bool = False

    @property
    def all_satisfied(self) -> bool:
        return all(item.satisfied for item in self.items)

    def item(self, requirement_id: str) -> Optional[RequirementVerdict]:
        for entry in self.items:
            if entry.requirement_id == requirement_id:
                return entry
        return None

    def to_dict(self) -> dict:
        return {"items": [i.to_dict() for i in self.items], "repaired": self.repaired}

    def render(self) -> str:
        lines = [
            f"{'✓' if item.satisfied else '✗'} {item.requirement_id}: {item.description}"
            + (f" ({item.note})" if item.note else "")
            for item in self.items
        ]
        return "\n".join(lines)


_NUMBER_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")


def check_answer_format(answer_format: str, text: str) -> bool:
    """Mechanical format check: number parses, string nonempty, list splits."""
    stripped = text.strip()
    if answer_format == "number":
        return bool(_NUMBER_RE.fullmatch(stripped))
    if answer_format == "string":
        return bool(stripped)
    if answer_format == "list":
        try:
            return isinstance(json.loads(stripped), list)
        except ValueError:
            return "," in stripped and len([p for p in stripped.split(",") if p.strip()]) >= 2
    return False


_ANSWER_BLOCK = re.compile(r"<answer>(.*?)</answer>", re.DOTALL | re.IGNORECASE)

MISSING_INFORMATION = "missing information"


def verify(
    trajectory: Trajectory,
    task: Task,
    env: Environment,
    model: Optional[GenerativeModel],
    trace: Optional[ExecutionTrace] = None,
    ledger: Optional[TokenLedger] = None,
) -> tuple[Trajectory, VerificationReport]:
    """Global gate: check every task requirement against the full trajectory.

    Environment-checkable constraints are checked there, format requirements
    mechanically, and whatever remains undecidable goes into one model call.
    Only format violations are mechanically repairable from data already in
    hand; at most one corrective model call rewrites the final answer, and
    nothing but the final answer step ever changes. Unrepairable items stay
    marked unsatisfied with a missing-information note.
    """
    final_step = trajectory.final_answer_step()
    if final_step is None:
        raise VerifyPreconditionError("trajectory has no terminal final_answer step")
    if trace is None:
        trace = execute_trajectory(trajectory, env, task)
    answer_text = final_step.action.text or ""

    verdicts: dict[str, RequirementVerdict] = {}
    undecided: list = []
    from .core import ConstraintVerdict  # local to avoid clutter above

    for constraint in task.constraints:
        result = env.check_constraint(constraint, trace)
        if result is ConstraintVerdict.SATISFIED:
            verdicts[constraint.id] = RequirementVerdict(constraint.id, constraint.description, True)
        elif result is ConstraintVerdict.VIOLATED:
            verdicts[constraint.id] = RequirementVerdict(
                constraint.id, constraint.description, False, MISSING_INFORMATION
            )
        else:
            undecided.append(constraint)

    if undecided:
        judged = _model_check(task, undecided, answer_text, model, ledger)
        verdicts.update(judged)

    format_ok = True
    if task.answer_format:
        format_ok = check_answer_format(task.answer_format, answer_text)
        verdicts["format"] = RequirementVerdict(
            "format",
            f"answer matches the requested format ({task.answer_format})",
            format_ok,
            "" if format_ok else f"expected {task.answer_format}",
        )

    repaired = False
    result_trajectory = trajectory
    if task.answer_format and not format_ok and model is not None:
        new_answer = _repair_answer(task, answer_text, model, ledger)
        if new_answer is not None and check_answer_format(task.answer_format, new_answer):
            repaired = True
            new_final = Step(
                index=final_step.index,
                action=Action(ActionKind.FINAL_ANSWER, text=new_answer),
                state_digest=final_step.state_digest,
                expected_outcome=final_step.expected_outcome,
            )
            result_trajectory = replace(
                trajectory, steps=trajectory.steps[:-1] + (new_final,)
            )
            verdicts["format"] = RequirementVerdict(
                "format",
                f"answer matches the requested format ({task.answer_format})",
                True,
                "repaired",
            )

    ordered = [verdicts[c.id] for c in task.constraints if c.id in verdicts]
    if "format" in verdicts:
        ordered.append(verdicts["format"])
    return result_trajectory, VerificationReport(items=tuple(ordered), repaired=repaired)


def _model_check(
    task: Task,
    constraints: Sequence,
    answer_text: str,
    model: Optional[GenerativeModel],
    ledger: Optional[TokenLedger],
) -> dict[str, RequirementVerdict]:
    fallback = {
        c.id: RequirementVerdict(c.id, c.description, False, MISSING_INFORMATION)
        for c in constraints
    }
    if model is None:
        return fallback
    system = AGENT_PREAMBLE + "\n\n" + stage_prompt("verify")
    user = "\n\n".join(
        [
            task_brief(task),
            "Requirements to check:\n"
            + "\n".join(f"- {c.id}: {c.description}" for c in constraints),
            f"Final answer:\n{answer_text}",
            'Respond with a single JSON object: {"requirements": '
            '[{"id": <string>, "satisfied": <bool>, "note": <string>}]}',
        ]
    )
    session = model.start_session(system)
    turn = session.send([{"role": "user", "content": user}])
    if ledger is not None:
        ledger.add(session.usage())
    obj = extract_json_object(turn.text or "")
    if obj is None or not isinstance(obj.get("requirements"), list):
        return fallback
    verdicts = dict(fallback)
    for entry in obj["requirements"]:
        if not isinstance(entry, dict) or entry.get("id") not in verdicts:
            continue
        base = verdicts[entry["id"]]
        satisfied = bool(entry.get("satisfied"))
        verdicts[entry["id"]] = RequirementVerdict(
            base.requirement_id,
            base.description,
            satisfied,
            str(entry.get("note", "")) if satisfied else str(entry.get("note") or MISSING_INFORMATION),
        )
    return verdicts


def _repair_answer(
    task: Task,
    answer_text: str,
    model: GenerativeModel,
    ledger: Optional[TokenLedger],
) -> Optional[str]:
    system = AGENT_PREAMBLE + "\n\n" + stage_prompt("verify")
    user = "\n\n".join(
        [
            task_brief(task),
            f"Current final answer:\n{answer_text}",
            f"The answer does not match the requested format ({task.answer_format}). "
            "Fix it now using only information already present. "
            "Output only the corrected answer inside <answer>...</answer> tags.",
        ]
    )
    session = model.start_session(system)
    turn = session.send([{"role": "user", "content": user}])
    if ledger is not None:
        ledger.add(session.usage())
    text = turn.text or ""
    match = _ANSWER_BLOCK.search(text)
    repaired = (match.group(1) if match else text).strip()
    return repaired or None
