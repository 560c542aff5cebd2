"""The refinement loop: plan pool, monotonic acceptance, final verification.

One run proceeds as: generate a pool of M candidate plans, execute and score
each, select the incumbent under the preference ordering (lowest pool index
breaks ties); then for up to R iterations re-execute the incumbent, inspect
it, exit early through verification on success, otherwise evolve a candidate
from the gradient, execute and score it, and accept it only if it strictly
improves on the incumbent. The incumbent is therefore the running argmin by
induction, and the final verification gates whatever it ends up being.

Per-iteration failures (backend errors, unusable revisions) never abort a
run: the candidate is treated as non-improving and the incumbent is
retained. Every decision is appended to the run's event record.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

from .core import (
    ConstraintVerdict,
    EngineError,
    Environment,
    ExecutionTrace,
    Task,
    Trajectory,
    execute_trajectory,
)
from .gateway import GenerativeModel, TokenLedger, resolve_backend
from .loss import LossBreakdown, LossOrdering, prefer, step_severities
from .microworld import resolve_environment
from .service.queue import InspectionQueue
from .service.store import Event, EventKind, RunRecord, RunStatus, validate_event
from .stages import (
    FeedbackProvider,
    HeuristicFeedbackProvider,
    HitlFeedbackProvider,
    InspectionChannel,
    JudgeFeedbackProvider,
    Regime,
    StageConfig,
    TextualGradient,
    VerificationReport,
    VerifyPreconditionError,
    direct_generate,
    evolve,
    inspect,
    plan,
    verify,
)
from .core import TokenCount

logger = logging.getLogger(__name__)


class EmptyPoolError(EngineError):
    pass


class RunFailure(EngineError):
    """A run aborted before producing a final trajectory."""


@dataclass(frozen=True)
class RunConfig:
    pool_size: int = 1
    max_iterations: int = 3
    divergence_threshold: float = 0.5
    ordering: LossOrdering = LossOrdering()
    stages: StageConfig = StageConfig()
    seed: int = 0
    model_ref: str = ""
    env_ref: str = ""
    backbone: str = ""
    feedback_timeout: float = 900.0

    def __post_init__(self) -> None:
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0.0 < self.divergence_threshold <= 1.0:
            raise ValueError("divergence_threshold must be in (0, 1]")
        if self.feedback_timeout < 0:
            raise ValueError("feedback_timeout must be >= 0")

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "max_iterations": self.max_iterations,
            "divergence_threshold": self.divergence_threshold,
            "ordering": self.ordering.to_dict(),
            "stages": self.stages.to_dict(),
            "seed": self.seed,
            "model_ref": self.model_ref,
            "env_ref": self.env_ref,
            "backbone": self.backbone,
            "feedback_timeout": self.feedback_timeout,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return cls(
            pool_size=data.get("pool_size", 1),
            max_iterations=data.get("max_iterations", 3),
            divergence_threshold=data.get("divergence_threshold", 0.5),
            ordering=LossOrdering.from_dict(data.get("ordering", {})),
            stages=StageConfig.from_dict(data.get("stages", {})),
            seed=data.get("seed", 0),
            model_ref=data.get("model_ref", ""),
            env_ref=data.get("env_ref", ""),
            backbone=data.get("backbone", ""),
            feedback_timeout=data.get("feedback_timeout", 900.0),
        )


@dataclass(frozen=True)
class IterationRecord:
    r: int
    candidate_loss: LossBreakdown
    incumbent_loss: LossBreakdown
    accepted: bool
    gradient: TextualGradient
    token_delta: TokenCount

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "candidate_loss": self.candidate_loss.to_dict(),
            "incumbent_loss": self.incumbent_loss.to_dict(),
            "accepted": self.accepted,
            "gradient": self.gradient.to_dict(),
            "token_delta": self.token_delta.to_dict(),
        }


@dataclass
class RunResult:
    trajectory: Trajectory
    report: Optional[VerificationReport]
    record: RunRecord
    iterations: list[IterationRecord] = field(default_factory=list)


def success(
    trace: ExecutionTrace,
    task: Task,
    env: Environment,
    goal_loss: Optional[float] = None,
) -> bool:
    """Goal fully achieved and every hard constraint satisfied.

    Undecidable constraints count as unsatisfied: success must be provable.
    """
    if goal_loss is None:
        goal = env.evaluate_goal(trace, task)
        if goal is None:
            return False
        goal_loss = 1.0 - goal
    if goal_loss != 0.0:
        return False
    return all(
        env.check_constraint(c, trace) is ConstraintVerdict.SATISFIED
        for c in task.hard_constraints()
    )


def select_incumbent(
    pool: list[tuple[Trajectory, LossBreakdown]], ordering: LossOrdering
) -> tuple[Trajectory, LossBreakdown]:
    """Minimal pool element under the preference ordering.

    Scans for the first element no other element improves on, so mutually
    non-improving candidates resolve to the lowest pool index.
    """
    if not pool:
        raise EmptyPoolError("candidate pool is empty")
    for index, (trajectory, loss) in enumerate(pool):
        if not any(
            prefer(other_loss, loss, ordering)
            for other_index, (_, other_loss) in enumerate(pool)
            if other_index != index
        ):
            return trajectory, loss
    return pool[0]  # unreachable for a strict partial order; defensive


class _Recorder:
    def __init__(self, record: RunRecord, on_event: Optional[Callable[[Event], None]]) -> None:
        self.record = record
        self.on_event = on_event
        self._seq = 0

    def emit(self, kind: EventKind, payload: dict, iteration: Optional[int] = None) -> None:
        event = Event(
            seq=self._seq, kind=kind, iteration=iteration, payload=payload, wall_time=time.time()
        )
        validate_event(event)
        self.record.events.append(event)
        self._seq += 1
        if self.on_event is not None:
            self.on_event(event)


def _emit_trace(recorder: _Recorder, trace: ExecutionTrace, phase: str, iteration: Optional[int]) -> None:
    for step in trace.steps:
        recorder.emit(
            EventKind.STEP_EXECUTED,
            {
                "phase": phase,
                "step_index": step.index,
                "action": step.realized_action.to_dict(),
                "outcome": step.outcome.to_dict(),
            },
            iteration=iteration,
        )


def _inspection_payload(
    phase: str, loss: LossBreakdown, planned: Trajectory, trace: ExecutionTrace, **extra: Any
) -> dict:
    payload = {
        "phase": phase,
        "loss": loss.to_dict(),
        "severities": step_severities(planned, trace),
        "trace_len": len(trace.steps),
        "terminated_early": trace.terminated_early,
    }
    payload.update(extra)
    return payload


def build_provider(
    cfg: RunConfig,
    model: GenerativeModel,
    run_id: str,
    channel: Optional[InspectionChannel],
    ledger: TokenLedger,
    set_status: Optional[Callable[[RunStatus], None]] = None,
    env: Optional[Environment] = None,
) -> FeedbackProvider:
    """Provider per regime: judge for auto, blocking human review for hitl
    (with judge fallback on timeout), heuristic when inspection is disabled."""
    if not cfg.stages.is_enabled("inspect"):
        return HeuristicFeedbackProvider()
    judge = JudgeFeedbackProvider(model, ledger)
    if cfg.stages.regime is Regime.HITL:
        def check_constraints(task: Task, trace: ExecutionTrace) -> dict[str, str]:
            if env is None:
                return {}
            return {c.id: env.check_constraint(c, trace).value for c in task.constraints}

        return HitlFeedbackProvider(
            channel=channel if channel is not None else InspectionQueue(),
            run_id=run_id,
            fallback=judge,
            timeout=cfg.feedback_timeout,
            on_wait=(lambda: set_status(RunStatus.AWAITING_FEEDBACK)) if set_status else None,
            on_resume=(lambda: set_status(RunStatus.RUNNING)) if set_status else None,
            constraint_checker=check_constraints,
        )
    return judge


def run(
    task: Task,
    cfg: RunConfig,
    model: Optional[GenerativeModel] = None,
    env: Optional[Environment] = None,
    feedback: Optional[FeedbackProvider] = None,
    channel: Optional[InspectionChannel] = None,
    on_event: Optional[Callable[[Event], None]] = None,
    set_status: Optional[Callable[[RunStatus], None]] = None,
    run_id: Optional[str] = None,
) -> RunResult:
    """Execute one full refinement run and return its outcome.

    `model` and `env` default to whatever cfg.model_ref / cfg.env_ref
    resolve to. A deterministic run id is derived from the task and seed
    unless one is supplied.
    """
    if model is None:
        model = resolve_backend(cfg.model_ref)
    if env is None:
        env = resolve_environment(cfg.env_ref)
    run_id = run_id or f"run-{task.id}-s{cfg.seed}"
    record = RunRecord(run_id=run_id, config=cfg)
    recorder = _Recorder(record, on_event)
    ledger = TokenLedger()
    provider = feedback or build_provider(cfg, model, run_id, channel, ledger, set_status, env)
    recorder.emit(
        EventKind.RUN_STARTED, {"task": task.to_dict(), "config": cfg.to_dict()}
    )
    try:
        result = _run_body(task, cfg, model, env, provider, recorder, ledger, record)
    except Exception as exc:
        record.status = RunStatus.FAILED
        recorder.emit(
            EventKind.RUN_FINISHED,
            {
                "status": "failed",
                "final_loss": None,
                "goal_score": None,
                "billed_tokens": ledger.total.billed,
                "iterations": 0,
                "error": str(exc),
            },
        )
        raise RunFailure(f"run {run_id} failed: {exc}") from exc
    return result


def _run_body(
    task: Task,
    cfg: RunConfig,
    model: GenerativeModel,
    env: Environment,
    provider: FeedbackProvider,
    recorder: _Recorder,
    ledger: TokenLedger,
    record: RunRecord,
) -> RunResult:
    stages_cfg = cfg.stages
    threshold = cfg.divergence_threshold
    plan_enabled = stages_cfg.is_enabled("plan")
    pool_size = cfg.pool_size if plan_enabled else 1

    pool: list[tuple[Trajectory, LossBreakdown]] = []
    for pool_index in range(pool_size):
        trajectory = (
            plan(task, model, ledger) if plan_enabled else direct_generate(task, model, ledger)
        )
        recorder.emit(
            EventKind.PLAN_GENERATED,
            {
                "pool_index": pool_index,
                "trajectory": trajectory.to_dict(),
                "degenerate": trajectory.degenerate,
                "plan_text": trajectory.plan_text,
            },
        )
        trace = execute_trajectory(trajectory, env, task)
        _emit_trace(recorder, trace, "pool", None)
        loss, _ = inspect(
            task, trajectory, trace, provider, env, threshold, need_gradient=False, ledger=ledger
        )
        recorder.emit(
            EventKind.INSPECTION,
            _inspection_payload("pool", loss, trajectory, trace, pool_index=pool_index),
        )
        pool.append((trajectory, loss))

    incumbent, incumbent_loss = select_incumbent(pool, cfg.ordering)
    iterations: list[IterationRecord] = []
    evolutions_used = 0

    if stages_cfg.is_enabled("evolve"):
        for r in range(cfg.max_iterations):
            incumbent_trace = execute_trajectory(incumbent, env, task)
            _emit_trace(recorder, incumbent_trace, "incumbent", r)
            incumbent_loss, gradient = inspect(
                task, incumbent, incumbent_trace, provider, env, threshold, ledger=ledger
            )
            recorder.emit(
                EventKind.INSPECTION,
                _inspection_payload("incumbent", incumbent_loss, incumbent, incumbent_trace),
                iteration=r,
            )
            recorder.emit(
                EventKind.GRADIENT,
                {
                    "gradient": gradient.to_dict(),
                    "computed_break_index": incumbent_loss.divergence_point,
                },
                iteration=r,
            )
            if success(incumbent_trace, task, env, goal_loss=incumbent_loss.goal_loss):
                iterations.append(
                    IterationRecord(r, incumbent_loss, incumbent_loss, False, gradient, ledger.delta())
                )
                recorder.emit(
                    EventKind.ACCEPTANCE_DECISION,
                    {
                        "candidate_loss": incumbent_loss.to_dict(),
                        "incumbent_loss": incumbent_loss.to_dict(),
                        "accepted": False,
                        "early_exit": True,
                    },
                    iteration=r,
                )
                break
            if evolutions_used >= stages_cfg.evolve_cap:
                logger.info("revision budget (%d) exhausted at r=%d", stages_cfg.evolve_cap, r)
                break
            accepted = False
            candidate_loss = incumbent_loss
            candidate: Optional[Trajectory] = None
            error_note: Optional[str] = None
            try:
                candidate, evolve_report = evolve(
                    incumbent, incumbent_trace, gradient, model, iteration=r, ledger=ledger
                )
                evolutions_used += 1
                recorder.emit(
                    EventKind.EVOLUTION,
                    {
                        "break_index": evolve_report.break_index,
                        "respliced": evolve_report.respliced,
                        "repeat_call_violation": evolve_report.repeat_call_violation,
                        "trajectory": candidate.to_dict(),
                        "gradient": gradient.to_dict(),
                    },
                    iteration=r,
                )
                candidate_trace = execute_trajectory(candidate, env, task)
                _emit_trace(recorder, candidate_trace, "candidate", r)
                candidate_loss, _ = inspect(
                    task,
                    candidate,
                    candidate_trace,
                    provider,
                    env,
                    threshold,
                    need_gradient=False,
                    ledger=ledger,
                )
                recorder.emit(
                    EventKind.INSPECTION,
                    _inspection_payload("candidate", candidate_loss, candidate, candidate_trace),
                    iteration=r,
                )
                accepted = prefer(candidate_loss, incumbent_loss, cfg.ordering)
            except EngineError as exc:
                # failed candidates are non-improving; the incumbent stands
                error_note = str(exc)
                candidate_loss = incumbent_loss
                accepted = False
                logger.warning("iteration %d candidate failed: %s", r, exc)
            iterations.append(
                IterationRecord(r, candidate_loss, incumbent_loss, accepted, gradient, ledger.delta())
            )
            recorder.emit(
                EventKind.ACCEPTANCE_DECISION,
                {
                    "candidate_loss": candidate_loss.to_dict(),
                    "incumbent_loss": incumbent_loss.to_dict(),
                    "accepted": accepted,
                    "early_exit": False,
                    "error": error_note,
                },
                iteration=r,
            )
            if accepted and candidate is not None:
                incumbent, incumbent_loss = candidate, candidate_loss

    final_trajectory = incumbent
    report: Optional[VerificationReport] = None
    if stages_cfg.is_enabled("verify"):
        try:
            final_trajectory, report = verify(incumbent, task, env, model, ledger=ledger)
            recorder.emit(EventKind.VERIFICATION, {"report": report.to_dict()})
        except VerifyPreconditionError as exc:
            recorder.emit(EventKind.VERIFICATION, {"report": None, "error": str(exc)})

    record.status = RunStatus.FINISHED
    recorder.emit(
        EventKind.RUN_FINISHED,
        {
            "status": "finished",
            "final_loss": incumbent_loss.to_dict(),
            "goal_score": 1.0 - incumbent_loss.goal_loss,
            "billed_tokens": ledger.total.billed,
            "iterations": len(iterations),
        },
    )
    return RunResult(
        trajectory=final_trajectory, report=report, record=record, iterations=iterations
    )
