"""Trajectory-refinement engine: plan, execute, diagnose, evolve, verify."""

from .core import (
    Action,
    ActionKind,
    Attachment,
    Constraint,
    ConstraintKind,
    ConstraintVerdict,
    EngineError,
    Environment,
    ExecutedStep,
    ExecutionTrace,
    ExpectedOutcome,
    Outcome,
    OutcomeStatus,
    Provenance,
    Step,
    Task,
    TokenCount,
    Trajectory,
    append_step,
    execute_trajectory,
    shared_prefix_len,
    validate,
)
from .loss import (
    LossBreakdown,
    LossOrdering,
    OrderingMode,
    locate_divergence,
    prefer,
    score_trace,
    step_severities,
)
from .gateway import (
    GenerativeModel,
    HttpBackend,
    HttpBackendConfig,
    InjectionSchedule,
    ModelTurn,
    ScriptedBackend,
    ScriptedTurnRecord,
    StopReason,
    ToolCallRequest,
    build_request,
    injection_trace,
    next_injection,
    resolve_backend,
)
from .stages import (
    FeedbackProvider,
    GradientSource,
    GradientSubmission,
    HeuristicFeedbackProvider,
    HitlFeedbackProvider,
    JudgeFeedbackProvider,
    Regime,
    ReviewPacket,
    StageConfig,
    TextualGradient,
    VerificationReport,
    evolve,
    inspect,
    plan,
    verify,
)
from .loop import IterationRecord, RunConfig, RunResult, run, select_incumbent, success
from .microworld import Microworld, RepairScenario, WorldSpec, repair_scenario, resolve_environment
from .tools import Toolbelt, ToolResult, ToolSpec

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
