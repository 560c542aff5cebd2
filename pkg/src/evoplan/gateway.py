"""Generative-model backends and the in-conversation prompt scheduler.

Two backends share one session interface: a deterministic scripted backend
that replays recorded turns (optionally asserting each outgoing request
against a recorded digest), and an HTTP backend speaking a
chat-completions-style wire protocol with native tool use.

The injection scheduler decides which stage prompt, if any, to splice into
the conversation at each turn boundary: plan once at the start, a reflection
checkpoint every N tool-call rounds, a plan-revision prompt after a tool
failure (capped), and a final verification prompt once before the answer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from .core import EngineError, TokenCount, canonical_json

logger = logging.getLogger(__name__)

REPLAY_FORMAT = "model-replay"
REPLAY_VERSION = 1


class BackendError(EngineError):
    """Model backend failure (network, auth, protocol)."""


class FixtureExhaustedError(EngineError):
    """Scripted replay ran out of recorded turns."""


class StrictReplayMismatch(EngineError):
    """Outgoing request diverged from the recorded fixture in strict mode."""


# ---------------------------------------------------------------------------
# turns and sessions


class StopReason(str, Enum):
    END_TURN = "end_turn"
    TOOL_USE = "tool_use"
    MAX_TOKENS = "max_tokens"


@dataclass(frozen=True)
class ToolCallRequest:
    tool_name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tool_name": self.tool_name, "arguments": dict(self.arguments)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolCallRequest":
        return cls(data["tool_name"], dict(data.get("arguments") or {}))


@dataclass(frozen=True)
class ModelTurn:
    text: Optional[str] = None
    tool_calls: tuple[ToolCallRequest, ...] = ()
    stop_reason: StopReason = StopReason.END_TURN

    def __post_init__(self) -> None:
        if bool(self.tool_calls) != (self.stop_reason is StopReason.TOOL_USE):
            raise ValueError("tool_calls nonempty iff stop_reason is tool_use")

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "tool_calls": [c.to_dict() for c in self.tool_calls],
            "stop_reason": self.stop_reason.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelTurn":
        return cls(
            text=data.get("text"),
            tool_calls=tuple(ToolCallRequest.from_dict(c) for c in data.get("tool_calls", [])),
            stop_reason=StopReason(data.get("stop_reason", "end_turn")),
        )


class ModelSession:
    """Single-owner conversation handle. Usage is monotonically non-decreasing."""

    def send(self, messages: Sequence[Mapping[str, Any]]) -> ModelTurn:
        raise NotImplementedError

    def usage(self) -> TokenCount:
        raise NotImplementedError


class GenerativeModel:
    def start_session(
        self, system_prompt: str, tool_specs: Sequence[Mapping[str, Any]] = ()
    ) -> ModelSession:
        raise NotImplementedError


class TokenLedger:
    """Accumulates token usage across the sessions of one run."""

    def __init__(self) -> None:
        self.total = TokenCount()
        self._mark = TokenCount()

    def add(self, usage: TokenCount) -> None:
        self.total = self.total + usage

    def delta(self) -> TokenCount:
        """Usage since the previous delta() call."""
        spent = TokenCount(
            self.total.input_tokens - self._mark.input_tokens,
            self.total.output_tokens - self._mark.output_tokens,
        )
        self._mark = self.total
        return spent


# ---------------------------------------------------------------------------
# injection scheduling


@dataclass
class ConversationState:
    """What the scheduler needs to know about the conversation so far."""

    rounds_completed: int = 0
    pending_failure: bool = False
    final_imminent: bool = False
    evolve_used: int = 0
    plan_injected: bool = False
    verify_injected: bool = False
    last_inspect_round: int = -1


@dataclass(frozen=True)
class InjectionSchedule:
    plan_at_start: bool = True
    inspect_every: int = 3
    evolve_on_failure_cap: int = 3
    verify_before_final: bool = True

    def __post_init__(self) -> None:
        if self.inspect_every < 0 or self.evolve_on_failure_cap < 0:
            raise ValueError("schedule parameters must be non-negative")

    @classmethod
    def from_stage_config(cls, stages) -> "InjectionSchedule":
        """Mirror the stage switches: a disabled stage never injects."""
        return cls(
            plan_at_start=stages.is_enabled("plan"),
            inspect_every=stages.inspect_interval if stages.is_enabled("inspect") else 0,
            evolve_on_failure_cap=stages.evolve_cap if stages.is_enabled("evolve") else 0,
            verify_before_final=stages.is_enabled("verify"),
        )


def next_injection(state: ConversationState, schedule: InjectionSchedule) -> Optional[str]:
    """Stage prompt to inject at this turn boundary, if any.

    At most one prompt per turn; on colliding triggers the priority is
    evolve > verify > inspect > plan, since failure recovery is the most
    time-critical and planning only ever applies to a fresh session.
    """
    if (
        state.pending_failure
        and schedule.evolve_on_failure_cap > 0
        and state.evolve_used < schedule.evolve_on_failure_cap
    ):
        return "evolve"
    if state.final_imminent and schedule.verify_before_final and not state.verify_injected:
        return "verify"
    if (
        schedule.inspect_every > 0
        and state.rounds_completed > 0
        and state.rounds_completed % schedule.inspect_every == 0
        and state.last_inspect_round != state.rounds_completed
        and not state.final_imminent
    ):
        return "inspect"
    if schedule.plan_at_start and state.rounds_completed == 0 and not state.plan_injected:
        return "plan"
    return None


def mark_injected(state: ConversationState, stage: str) -> None:
    if stage == "plan":
        state.plan_injected = True
    elif stage == "inspect":
        state.last_inspect_round = state.rounds_completed
    elif stage == "evolve":
        state.evolve_used += 1
        state.pending_failure = False
    elif stage == "verify":
        state.verify_injected = True
    else:
        raise ValueError(f"unknown stage: {stage}")


def injection_trace(
    total_rounds: int,
    failure_rounds: Iterable[int],
    schedule: InjectionSchedule = InjectionSchedule(),
) -> list[str]:
    """Simulate a session of tool-call rounds and report the injections.

    The model signals final-answer intent after the last round; entries are
    "stage@round" with "verify@final" for the closing gate.
    """
    failures = set(failure_rounds)
    state = ConversationState()
    trace: list[str] = []
    stage = next_injection(state, schedule)
    if stage:
        mark_injected(state, stage)
        trace.append(f"{stage}@0")
    for round_no in range(1, total_rounds + 1):
        state.rounds_completed = round_no
        state.pending_failure = round_no in failures
        state.final_imminent = round_no == total_rounds
        stage = next_injection(state, schedule)
        if stage:
            mark_injected(state, stage)
            trace.append(f"{stage}@final" if stage == "verify" else f"{stage}@{round_no}")
    return trace


# ---------------------------------------------------------------------------
# scripted replay backend


def digest_request(
    system_prompt: str,
    tool_specs: Sequence[Mapping[str, Any]],
    messages: Sequence[Mapping[str, Any]],
) -> str:
    body = canonical_json(
        {
            "system": system_prompt,
            "tools": [dict(t) for t in tool_specs],
            "messages": [dict(m) for m in messages],
        }
    )
    return "sha256:" + hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ScriptedTurnRecord:
    turn: ModelTurn
    usage: TokenCount = TokenCount()
    expect_digest: Optional[str] = None
    expected_messages: Optional[Any] = None  # full request copy, for diffable errors

    def to_dict(self) -> dict:
        return {
            "expect_digest": self.expect_digest,
            "turn": self.turn.to_dict(),
            "usage": self.usage.to_dict(),
            "expected_messages": self.expected_messages,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedTurnRecord":
        return cls(
            turn=ModelTurn.from_dict(data["turn"]),
            usage=TokenCount.from_dict(data.get("usage") or {"input_tokens": 0, "output_tokens": 0}),
            expect_digest=data.get("expect_digest"),
            expected_messages=data.get("expected_messages"),
        )


def _request_diff(expected: Any, actual: Any) -> str:
    """Name the top-level request fields that diverge."""
    fields = []
    for key in ("system", "tools", "messages"):
        if expected.get(key) != actual.get(key):
            fields.append(key)
    return f"divergent fields: {', '.join(fields) or 'unknown'}"


class ScriptedBackend(GenerativeModel):
    """Replays an ordered fixture of model turns.

    In strict mode every outgoing request must match the recorded digest;
    mismatches raise StrictReplayMismatch naming the divergent fields when
    the full recorded request is available. All sessions share one cursor,
    so the fixture is consumed in global call order.
    """

    def __init__(self, records: Sequence[ScriptedTurnRecord], strict: bool = False) -> None:
        self.records = list(records)
        self.strict = strict
        self.cursor = 0
        self.outgoing: list[dict] = []  # every request, for golden-file assertions
        self.total_usage = TokenCount()
        self._lock = threading.Lock()

    @classmethod
    def from_turns(cls, turns: Sequence[ModelTurn], usage: TokenCount = TokenCount()) -> "ScriptedBackend":
        return cls([ScriptedTurnRecord(turn=t, usage=usage) for t in turns])

    def start_session(
        self, system_prompt: str, tool_specs: Sequence[Mapping[str, Any]] = ()
    ) -> "ScriptedSession":
        return ScriptedSession(self, system_prompt, tuple(tool_specs))

    def _next(self, request: dict) -> ScriptedTurnRecord:
        with self._lock:
            self.outgoing.append(request)
            if self.cursor >= len(self.records):
                raise FixtureExhaustedError(
                    f"fixture exhausted after {len(self.records)} turns"
                )
            record = self.records[self.cursor]
            if self.strict and record.expect_digest is not None:
                actual = digest_request(request["system"], request["tools"], request["messages"])
                if actual != record.expect_digest:
                    detail = (
                        _request_diff(record.expected_messages, request)
                        if record.expected_messages is not None
                        else f"expected {record.expect_digest}, got {actual}"
                    )
                    raise StrictReplayMismatch(f"turn {self.cursor}: {detail}")
            self.cursor += 1
            self.total_usage = self.total_usage + record.usage
            return record


class ScriptedSession(ModelSession):
    def __init__(self, backend: ScriptedBackend, system_prompt: str, tool_specs: tuple) -> None:
        self.backend = backend
        self.system_prompt = system_prompt
        self.tool_specs = tool_specs
        self._usage = TokenCount()

    def send(self, messages: Sequence[Mapping[str, Any]]) -> ModelTurn:
        request = {
            "system": self.system_prompt,
            "tools": [dict(t) for t in self.tool_specs],
            "messages": [dict(m) for m in messages],
        }
        record = self.backend._next(request)
        self._usage = self._usage + record.usage
        return record.turn

    def usage(self) -> TokenCount:
        return self._usage


def save_replay_fixture(path: str | Path, records: Sequence[ScriptedTurnRecord]) -> None:
    lines = [canonical_json({"format": REPLAY_FORMAT, "version": REPLAY_VERSION})]
    lines += [canonical_json(r.to_dict()) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_replay_fixture(path: str | Path) -> list[ScriptedTurnRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise BackendError(f"empty replay fixture: {path}")
    header = json.loads(lines[0])
    if header.get("format") != REPLAY_FORMAT:
        raise BackendError(f"not a replay fixture: {path}")
    return [ScriptedTurnRecord.from_dict(json.loads(line)) for line in lines[1:] if line.strip()]


# ---------------------------------------------------------------------------
# HTTP backend (chat-completions wire protocol)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    backoff_cap: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor**attempt)


@dataclass(frozen=True)
class HttpBackendConfig:
    endpoint: str
    model: str
    auth_token_env: str = "MODEL_API_KEY"
    temperature: Optional[float] = None
    thinking: bool = False
    request_timeout: float = 60.0
    max_in_flight: int = 4
    retry: RetryPolicy = RetryPolicy()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "HttpBackendConfig":
        retry = RetryPolicy(**data["retry"]) if "retry" in data else RetryPolicy()
        return cls(
            endpoint=data["endpoint"],
            model=data["model"],
            auth_token_env=data.get("auth_token_env", "MODEL_API_KEY"),
            temperature=data.get("temperature"),
            thinking=data.get("thinking", False),
            request_timeout=data.get("request_timeout", 60.0),
            max_in_flight=data.get("max_in_flight", 4),
            retry=retry,
        )

    @classmethod
    def load(cls, path: str | Path) -> "HttpBackendConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


def build_request(
    config: HttpBackendConfig,
    system_prompt: str,
    tool_specs: Sequence[Mapping[str, Any]],
    messages: Sequence[Mapping[str, Any]],
) -> dict:
    """Assemble the wire payload.

    Temperature is 0.0 for deterministic decoding unless extended thinking
    is enabled, in which case it is forced to 1.0 regardless of any
    configured value.
    """
    if config.thinking:
        temperature = 1.0
    elif config.temperature is not None:
        temperature = config.temperature
    else:
        temperature = 0.0
    payload: dict = {
        "model": config.model,
        "temperature": temperature,
        "messages": [{"role": "system", "content": system_prompt}, *messages],
    }
    if tool_specs:
        payload["tools"] = [
            {
                "type": "function",
                "function": {
                    "name": spec["name"],
                    "description": spec.get("description", ""),
                    "parameters": spec.get("input_schema", {}),
                },
            }
            for spec in tool_specs
        ]
    if config.thinking:
        payload["thinking"] = True
    return payload


def parse_turn(response: Mapping[str, Any]) -> tuple[ModelTurn, TokenCount]:
    try:
        choice = response["choices"][0]
        message = choice["message"]
    except (KeyError, IndexError) as exc:
        raise BackendError(f"malformed completion response: {exc}") from exc
    calls = tuple(
        ToolCallRequest(
            tool_name=c["function"]["name"],
            arguments=json.loads(c["function"].get("arguments") or "{}"),
        )
        for c in message.get("tool_calls") or []
    )
    finish = choice.get("finish_reason", "stop")
    if calls:
        stop = StopReason.TOOL_USE
    elif finish == "length":
        stop = StopReason.MAX_TOKENS
    else:
        stop = StopReason.END_TURN
    usage = response.get("usage") or {}
    tokens = TokenCount(
        int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
    )
    return ModelTurn(text=message.get("content"), tool_calls=calls, stop_reason=stop), tokens


class HttpBackend(GenerativeModel):
    """Chat-completions client with retry/backoff and an in-flight cap."""

    def __init__(
        self,
        config: HttpBackendConfig,
        transport: Optional[Callable[[dict, dict], tuple[int, dict]]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self._transport = transport or self._http_post
        self._sleep = sleep
        self._gate = threading.Semaphore(config.max_in_flight)

    def _http_post(self, payload: dict, headers: dict) -> tuple[int, dict]:
        import httpx

        response = httpx.post(
            self.config.endpoint,
            json=payload,
            headers=headers,
            timeout=self.config.request_timeout,
        )
        try:
            body = response.json()
        except ValueError:
            body = {}
        return response.status_code, body

    def start_session(
        self, system_prompt: str, tool_specs: Sequence[Mapping[str, Any]] = ()
    ) -> "HttpSession":
        return HttpSession(self, system_prompt, tuple(tool_specs))

    def _headers(self) -> dict:
        headers = {"content-type": "application/json"}
        token = os.environ.get(self.config.auth_token_env, "")
        if token:
            headers["authorization"] = f"Bearer {token}"
        return headers

    def complete(self, payload: dict) -> tuple[ModelTurn, TokenCount, int]:
        retries = 0
        policy = self.config.retry
        with self._gate:
            while True:
                try:
                    status, body = self._transport(payload, self._headers())
                except Exception as exc:  # network-level failure
                    if retries >= policy.max_retries:
                        raise BackendError(f"transport failed after {retries} retries: {exc}") from exc
                    self._sleep(policy.delay(retries))
                    retries += 1
                    continue
                if status in RETRYABLE_STATUS:
                    if retries >= policy.max_retries:
                        raise BackendError(f"HTTP {status} after {retries} retries")
                    self._sleep(policy.delay(retries))
                    retries += 1
                    continue
                if status >= 400:
                    raise BackendError(f"HTTP {status}: {canonical_json(body)[:500]}")
                turn, usage = parse_turn(body)
                if retries:
                    logger.info("request succeeded after %d retries", retries)
                return turn, usage, retries


class HttpSession(ModelSession):
    def __init__(self, backend: HttpBackend, system_prompt: str, tool_specs: tuple) -> None:
        self.backend = backend
        self.system_prompt = system_prompt
        self.tool_specs = tool_specs
        self.last_retries = 0
        self._usage = TokenCount()

    def send(self, messages: Sequence[Mapping[str, Any]]) -> ModelTurn:
        payload = build_request(self.backend.config, self.system_prompt, self.tool_specs, messages)
        turn, usage, retries = self.backend.complete(payload)
        self.last_retries = retries
        self._usage = self._usage + usage
        return turn

    def usage(self) -> TokenCount:
        return self._usage


def resolve_backend(model_ref: str) -> GenerativeModel:
    """Map a backend descriptor to a constructed backend.

    "scripted:<fixture-path>" replays a recorded fixture (append ":strict"
    for golden-file request checking); "http:<config-path>" builds the HTTP
    client from a JSON config file.
    """
    if model_ref.startswith("scripted:"):
        rest = model_ref[len("scripted:"):]
        strict = rest.endswith(":strict")
        path = rest[: -len(":strict")] if strict else rest
        return ScriptedBackend(load_replay_fixture(path), strict=strict)
    if model_ref.startswith("http:"):
        return HttpBackend(HttpBackendConfig.load(model_ref[len("http:"):]))
    raise BackendError(f"unknown model backend descriptor: {model_ref!r}")
