"""Deterministic itinerary-planning micro-environment and the env registry.

The world holds a small catalog of named entities (restaurants, hotels,
attractions, transport legs) with prices, ratings, opening hours, and tags.
Two actions exist: `query_entity` looks a name up in the index and
`book_entity` appends a schedule slot and debits the budget. A lookup miss is
an ok-status "not found" payload, not a tool error: the interesting failures
here are semantic misses the plan has to detect through its own
expectations, which is exactly what drives divergence in the canonical
repair scenario.

Constraint predicates are declared in the world spec and referenced from
tasks by id: must-include-entity, budget bounds, opening-hours containment,
attribute comparisons, and time-window containment.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from .core import (
    Action,
    ActionKind,
    Constraint,
    ConstraintKind,
    ConstraintVerdict,
    EngineError,
    Environment,
    ExecutionTrace,
    Outcome,
    OutcomeStatus,
    Task,
    canonical_json,
    digest_state,
)
from .gateway import ModelTurn, ScriptedTurnRecord, StopReason, save_replay_fixture
from .core import TokenCount

WORLD_FORMAT = "microworld"
WORLD_VERSION = 1

ENTITY_KINDS = ("restaurant", "hotel", "attraction", "transport")


class WorldError(EngineError):
    pass


def parse_hhmm(text: str) -> int:
    match = re.fullmatch(r"(\d{1,2}):(\d{2})", text.strip())
    if not match:
        raise WorldError(f"not a HH:MM time: {text!r}")
    hours, minutes = int(match.group(1)), int(match.group(2))
    if hours > 24 or minutes > 59 or (hours == 24 and minutes > 0):
        raise WorldError(f"time out of range: {text!r}")
    return hours * 60 + minutes


def render_hhmm(minutes: int) -> str:
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


@dataclass(frozen=True)
class Entity:
    name: str
    kind: str
    price: float
    rating: float
    open_min: int = 0
    close_min: int = 24 * 60
    tags: tuple[str, ...] = ()
    location: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ENTITY_KINDS:
            raise WorldError(f"unknown entity kind: {self.kind}")
        if not self.open_min < self.close_min:
            raise WorldError(f"entity {self.name}: open must precede close")

    def details(self) -> str:
        return canonical_json(
            {
                "name": self.name,
                "kind": self.kind,
                "price": self.price,
                "rating": self.rating,
                "hours": f"{render_hhmm(self.open_min)}-{render_hhmm(self.close_min)}",
                "tags": list(self.tags),
                "location": self.location,
            }
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "price": self.price,
            "rating": self.rating,
            "open": render_hhmm(self.open_min),
            "close": render_hhmm(self.close_min),
            "tags": list(self.tags),
            "location": self.location,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Entity":
        return cls(
            name=data["name"],
            kind=data["kind"],
            price=float(data["price"]),
            rating=float(data["rating"]),
            open_min=parse_hhmm(data.get("open", "00:00")),
            close_min=parse_hhmm(data.get("close", "24:00")),
            tags=tuple(data.get("tags", ())),
            location=data.get("location", ""),
        )


@dataclass(frozen=True)
class WorldSpec:
    entities: tuple[Entity, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)
    predicates: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    budget: float = float("inf")
    fuzzy_index: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        names = [e.name for e in self.entities]
        if len(names) != len(set(names)):
            raise WorldError("entity names must be unique")
        for alias, target in self.aliases.items():
            if target not in names:
                raise WorldError(f"alias {alias!r} points at unknown entity {target!r}")

    def to_dict(self) -> dict:
        return {
            "format": WORLD_FORMAT,
            "version": WORLD_VERSION,
            "entities": [e.to_dict() for e in self.entities],
            "aliases": dict(self.aliases),
            "predicates": {k: dict(v) for k, v in self.predicates.items()},
            "budget": self.budget if self.budget != float("inf") else None,
            "fuzzy_index": self.fuzzy_index,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorldSpec":
        budget = data.get("budget")
        return cls(
            entities=tuple(Entity.from_dict(e) for e in data.get("entities", [])),
            aliases=dict(data.get("aliases", {})),
            predicates=dict(data.get("predicates", {})),
            budget=float("inf") if budget is None else float(budget),
            fuzzy_index=data.get("fuzzy_index", False),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != WORLD_FORMAT:
            raise WorldError(f"not a world spec file: {path}")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()), encoding="utf-8")


@dataclass(frozen=True)
class BookingEntry:
    entity: str
    day: int
    start_min: int
    end_min: int
    price: float

    def to_dict(self) -> dict:
        return {
            "entity": self.entity,
            "day": self.day,
            "start": render_hhmm(self.start_min),
            "end": render_hhmm(self.end_min),
            "price": self.price,
        }


@dataclass(frozen=True)
class ItineraryState:
    schedule: tuple[BookingEntry, ...] = ()
    budget_spent: float = 0.0
    day_index: int = 0

    def to_dict(self) -> dict:
        return {
            "schedule": [b.to_dict() for b in self.schedule],
            "budget_spent": self.budget_spent,
            "day_index": self.day_index,
        }


class Microworld(Environment):
    """Deterministic environment over a WorldSpec.

    State digests map to itinerary states held by this instance, so each run
    should own a private world.
    """

    def __init__(self, spec: WorldSpec) -> None:
        self.spec = spec
        self._index = {e.name: e for e in spec.entities}
        self._states: dict[str, ItineraryState] = {}

    # -- lookups ------------------------------------------------------------

    def lookup(self, name: str) -> Optional[Entity]:
        entity = self._index.get(name)
        if entity is not None:
            return entity
        target = self.spec.aliases.get(name)
        if target is not None:
            return self._index.get(target)
        if self.spec.fuzzy_index:
            wanted = name.casefold()
            for candidate in self.spec.entities:
                lowered = candidate.name.casefold()
                if wanted in lowered or lowered in wanted:
                    return candidate
        return None

    # -- environment interface ----------------------------------------------

    def reset(self, task: Task) -> str:
        return self._remember(ItineraryState())

    def _remember(self, state: ItineraryState) -> str:
        digest = digest_state(state.to_dict(), seed=self.spec.seed)
        self._states[digest] = state
        return digest

    def step(self, state_digest: str, action: Action) -> tuple[str, Outcome]:
        state = self._states.get(state_digest)
        if state is None:
            raise WorldError(f"unknown state digest: {state_digest[:12]}")
        new_state, outcome = self._apply(state, action)
        return self._remember(new_state), outcome

    def _apply(self, state: ItineraryState, action: Action) -> tuple[ItineraryState, Outcome]:
        if action.kind is ActionKind.REASONING:
            return state, Outcome(OutcomeStatus.OK, "noted")
        if action.kind is ActionKind.FINAL_ANSWER:
            return state, Outcome(OutcomeStatus.OK, action.text or "")
        name = action.tool_name
        args = dict(action.arguments)
        if name == "query_entity":
            return state, self._query(args)
        if name == "book_entity":
            return self._book(state, args)
        return state, Outcome(OutcomeStatus.TOOL_ERROR, f"unknown world action: {name}")

    def _query(self, args: Mapping[str, Any]) -> Outcome:
        target = args.get("name")
        if not isinstance(target, str) or not target:
            return Outcome(OutcomeStatus.TOOL_ERROR, "query_entity requires a name string")
        entity = self.lookup(target)
        if entity is None:
            # retrieval miss, not an error: plans detect it via expectations
            return Outcome(OutcomeStatus.OK, f"not found: {target}")
        return Outcome(OutcomeStatus.OK, entity.details())

    def _book(self, state: ItineraryState, args: Mapping[str, Any]) -> tuple[ItineraryState, Outcome]:
        target = args.get("name")
        if not isinstance(target, str) or not target:
            return state, Outcome(OutcomeStatus.TOOL_ERROR, "book_entity requires a name string")
        try:
            day = int(args.get("day", 0))
            start = parse_hhmm(str(args.get("start", "00:00")))
            end = parse_hhmm(str(args.get("end", "24:00")))
        except (WorldError, TypeError, ValueError) as exc:
            return state, Outcome(OutcomeStatus.TOOL_ERROR, f"malformed booking arguments: {exc}")
        if start >= end:
            return state, Outcome(OutcomeStatus.TOOL_ERROR, "booking start must precede end")
        entity = self.lookup(target)
        if entity is None:
            return state, Outcome(OutcomeStatus.INFEASIBLE, f"unknown entity: {target}")
        for booked in state.schedule:
            if booked.day == day and start < booked.end_min and booked.start_min < end:
                return state, Outcome(
                    OutcomeStatus.INFEASIBLE,
                    f"slot overlaps existing booking of {booked.entity}",
                )
        if state.budget_spent + entity.price > self.spec.budget:
            remaining = self.spec.budget - state.budget_spent
            return state, Outcome(
                OutcomeStatus.INFEASIBLE,
                f"booking {entity.name} costs {entity.price:.2f}, exceeds remaining budget {remaining:.2f}",
            )
        entry = BookingEntry(entity.name, day, start, end, entity.price)
        new_state = replace(
            state,
            schedule=state.schedule + (entry,),
            budget_spent=state.budget_spent + entity.price,
            day_index=max(state.day_index, day),
        )
        return new_state, Outcome(
            OutcomeStatus.OK,
            f"booked {entity.name} day {day} {render_hhmm(start)}-{render_hhmm(end)}",
        )

    def _replay(self, trace: ExecutionTrace) -> ItineraryState:
        state = ItineraryState()
        for step in trace.steps:
            state, _ = self._apply(state, step.realized_action)
        return state

    def evaluate_goal(self, trace: ExecutionTrace, task: Task) -> Optional[float]:
        if trace.terminated_early:
            return 0.0
        if not task.constraints:
            return 1.0
        state = self._replay(trace)
        satisfied = sum(
            1
            for c in task.constraints
            if self._evaluate_predicate(c.predicate_ref, state) is True
        )
        return satisfied / len(task.constraints)

    def check_constraint(self, constraint: Constraint, trace: ExecutionTrace) -> ConstraintVerdict:
        state = self._replay(trace)
        result = self._evaluate_predicate(constraint.predicate_ref, state)
        if result is None:
            return ConstraintVerdict.UNDECIDABLE
        return ConstraintVerdict.SATISFIED if result else ConstraintVerdict.VIOLATED

    def _evaluate_predicate(self, ref: str, state: ItineraryState) -> Optional[bool]:
        predicate = self.spec.predicates.get(ref)
        if predicate is None:
            return None
        kind = predicate.get("type")
        if kind == "must_include":
            return any(b.entity == predicate["entity"] for b in state.schedule)
        if kind == "budget_max":
            return state.budget_spent <= float(predicate["amount"])
        if kind == "within_hours":
            for booking in state.schedule:
                entity = self._index.get(booking.entity)
                if entity is None:
                    return None
                if booking.start_min < entity.open_min or booking.end_min > entity.close_min:
                    return False
            return True
        if kind == "within_window":
            window_start = parse_hhmm(predicate["start"])
            window_end = parse_hhmm(predicate["end"])
            for booking in state.schedule:
                if booking.entity == predicate["entity"]:
                    return window_start <= booking.start_min and booking.end_min <= window_end
            return False
        if kind in ("attr_at_least", "attr_at_most"):
            entity = self._index.get(predicate["entity"])
            if entity is None or not any(b.entity == predicate["entity"] for b in state.schedule):
                return False
            value = getattr(entity, predicate["attr"], None)
            if value is None:
                return None
            limit = float(predicate["value"])
            return value >= limit if kind == "attr_at_least" else value <= limit
        return None


class ToolWorld(Environment):
    """Environment whose actions are toolbelt calls.

    Goal scoring is delegated to the judge (evaluate_goal returns None) and
    constraints are undecidable at the environment level.
    """

    def __init__(self, toolbelt, task: Optional[Task] = None) -> None:
        self.toolbelt = toolbelt
        self._task = task
        self._counter = 0

    def reset(self, task: Task) -> str:
        self._task = task
        self._counter = 0
        return digest_state({"turn": 0})

    def step(self, state_digest: str, action: Action) -> tuple[str, Outcome]:
        self._counter += 1
        digest = digest_state({"turn": self._counter})
        if action.kind is ActionKind.REASONING:
            return digest, Outcome(OutcomeStatus.OK, "noted")
        if action.kind is ActionKind.FINAL_ANSWER:
            return digest, Outcome(OutcomeStatus.OK, action.text or "")
        result = self.toolbelt.invoke(action.tool_name, dict(action.arguments), self._task)
        status = {
            "ok": OutcomeStatus.OK,
            "error": OutcomeStatus.TOOL_ERROR,
            "timeout": OutcomeStatus.TIMEOUT,
        }[result.status.value]
        payload = result.content or ("error" if status is not OutcomeStatus.OK else "")
        return digest, Outcome(status, payload)

    def evaluate_goal(self, trace: ExecutionTrace, task: Task) -> Optional[float]:
        return None

    def check_constraint(self, constraint: Constraint, trace: ExecutionTrace) -> ConstraintVerdict:
        return ConstraintVerdict.UNDECIDABLE


def resolve_environment(env_ref: str, toolbelt=None) -> Environment:
    """Map an environment descriptor to a constructed environment.

    "microworld:<spec-file>" loads a world spec; "toolworld" wraps the
    toolbelt (an offline-stubbed default is built when none is supplied).
    """
    if env_ref.startswith("microworld:"):
        return Microworld(WorldSpec.load(env_ref[len("microworld:"):]))
    if env_ref == "toolworld":
        if toolbelt is None:
            from .tools import Toolbelt

            toolbelt = Toolbelt()
        return ToolWorld(toolbelt)
    raise WorldError(f"unknown environment descriptor: {env_ref!r}")


# ---------------------------------------------------------------------------
# canonical repair scenario


@dataclass(frozen=True)
class RepairScenario:
    task: Task
    world_spec: WorldSpec
    fixtures: Mapping[str, tuple[ScriptedTurnRecord, ...]]

    def world(self) -> Microworld:
        return Microworld(self.world_spec)


_MISSED_NAME = "Canyon Flavor Restaurant"
_INDEXED_NAME = "Grand Canyon Flavor Restaurant"

_INITIAL_PLAN = f"""I will plan the day and then execute it.
<plan>
1. Goal: plan a one-day canyon trip with the required must-eat restaurant, within budget.
2. Look up the canyon attraction. [tool: query_entity {{"name": "Enshi Grand Canyon"}}] [expect: rating]
3. Book the canyon for the morning. [tool: book_entity {{"name": "Enshi Grand Canyon", "day": 0, "start": "09:00", "end": "12:00"}}] [expect: booked]
4. Look up the must-eat restaurant. [tool: query_entity {{"name": "{_MISSED_NAME}"}}] [expect: rating]
5. Book lunch there. [tool: book_entity {{"name": "{_MISSED_NAME}", "day": 0, "start": "12:30", "end": "13:30"}}] [expect: booked]
6. [final] Day plan: Enshi Grand Canyon 09:00-12:00, lunch at {_MISSED_NAME} 12:30-13:30.
</plan>"""

_JUDGE_VERDICT = canonical_json(
    {
        "goal_score": 0.75,
        "observed_failure": "The itinerary never includes the required must-eat restaurant, violating C4.",
        "downstream_manifestation": "The lunch booking failed because the queried restaurant name returned no entity.",
        "earliest_break_index": 3,
        "repair_instruction": (
            f'Query the indexed name variation "{_INDEXED_NAME}" instead of repeating the failed '
            "name, then book it for lunch."
        ),
    }
)

_EVOLVED_PLAN = f"""DIAGNOSE: the name "{_MISSED_NAME}" is not in the index; the catalog lists a longer variant.
ALTERNATIVE: query the variant name "{_INDEXED_NAME}" and book it.
FALLBACK: keep the canyon itinerary and flag the missing lunch.
<plan>
1. Goal: plan a one-day canyon trip with the required must-eat restaurant, within budget.
2. Look up the canyon attraction. [tool: query_entity {{"name": "Enshi Grand Canyon"}}] [expect: rating]
3. Book the canyon for the morning. [tool: book_entity {{"name": "Enshi Grand Canyon", "day": 0, "start": "09:00", "end": "12:00"}}] [expect: booked]
4. Look up the variant restaurant name. [tool: query_entity {{"name": "{_INDEXED_NAME}"}}] [expect: rating]
5. Book lunch there. [tool: book_entity {{"name": "{_INDEXED_NAME}", "day": 0, "start": "12:30", "end": "13:30"}}] [expect: booked]
6. [final] Day plan: Enshi Grand Canyon 09:00-12:00, lunch at {_INDEXED_NAME} 12:30-13:30.
</plan>"""

_REACT_ANSWER = f"""1. Look up the canyon attraction. [tool: query_entity {{"name": "Enshi Grand Canyon"}}]
2. Book the canyon for the morning. [tool: book_entity {{"name": "Enshi Grand Canyon", "day": 0, "start": "09:00", "end": "12:00"}}]
3. Look up the must-eat restaurant. [tool: query_entity {{"name": "{_MISSED_NAME}"}}]
4. Book lunch there. [tool: book_entity {{"name": "{_MISSED_NAME}", "day": 0, "start": "12:30", "end": "13:30"}}]
5. [final] Day plan: Enshi Grand Canyon 09:00-12:00, lunch at {_MISSED_NAME} 12:30-13:30."""


def _text_turn(text: str, input_tokens: int, output_tokens: int) -> ScriptedTurnRecord:
    return ScriptedTurnRecord(
        turn=ModelTurn(text=text, stop_reason=StopReason.END_TURN),
        usage=TokenCount(input_tokens, output_tokens),
    )


def repair_scenario() -> RepairScenario:
    """Canned end-to-end scenario: a failed retrieval breaks one constraint.

    The initial plan queries a restaurant under a name the index does not
    hold, leaving constraint C4 unmet (composite 0.75). One evolution queries
    the indexed variant and restores a perfect itinerary (composite 1.0,
    verification all-satisfied). Fixture keys: "auto" (judge feedback),
    "hitl" (human feedback, no judge turns), "no_evolve", and "react".
    """
    entities = (
        Entity(
            name="Enshi Grand Canyon",
            kind="attraction",
            price=30.0,
            rating=4.9,
            open_min=parse_hhmm("08:00"),
            close_min=parse_hhmm("18:00"),
            tags=("scenic",),
            location="Enshi",
        ),
        Entity(
            name=_INDEXED_NAME,
            kind="restaurant",
            price=40.0,
            rating=4.8,
            open_min=parse_hhmm("11:00"),
            close_min=parse_hhmm("22:00"),
            tags=("local", "must-eat"),
            location="Enshi",
        ),
        Entity(
            name="Cliffside Hotel",
            kind="hotel",
            price=120.0,
            rating=4.2,
            tags=("view",),
            location="Enshi",
        ),
    )
    predicates = {
        "P1": {"type": "must_include", "entity": "Enshi Grand Canyon"},
        "P2": {"type": "budget_max", "amount": 300.0},
        "P3": {"type": "within_hours"},
        "P4": {"type": "must_include", "entity": _INDEXED_NAME},
    }
    world_spec = WorldSpec(entities=entities, predicates=predicates, budget=300.0, seed=7)
    task = Task(
        id="canyon-day-trip",
        goal_text=(
            "Plan a one-day Enshi trip: visit the Grand Canyon in the morning and eat "
            f'lunch at "{_MISSED_NAME}", staying under the 300 budget.'
        ),
        constraints=(
            Constraint("C1", ConstraintKind.HARD, "P1", "the canyon attraction is visited"),
            Constraint("C2", ConstraintKind.HARD, "P2", "total spend stays within the 300 budget"),
            Constraint("C3", ConstraintKind.HARD, "P3", "every booking is inside opening hours"),
            Constraint("C4", ConstraintKind.HARD, "P4", "the must-eat restaurant is included"),
        ),
    )
    plan_turn = _text_turn(_INITIAL_PLAN, 940, 320)
    judge_turn = _text_turn(_JUDGE_VERDICT, 710, 160)
    evolve_turn = _text_turn(_EVOLVED_PLAN, 880, 300)
    react_turn = _text_turn(_REACT_ANSWER, 450, 260)
    fixtures = {
        "auto": (plan_turn, judge_turn, evolve_turn),
        "hitl": (plan_turn, evolve_turn),
        "hitl_fallback": (plan_turn, judge_turn, evolve_turn),
        "no_evolve": (plan_turn,),
        "react": (react_turn,),
    }
    return RepairScenario(task=task, world_spec=world_spec, fixtures=fixtures)


def write_scenario_bundle(out_dir: str | Path) -> Path:
    """Materialize the repair scenario as files a CLI run can reference."""
    out = Path(out_dir)
    (out / "fixtures").mkdir(parents=True, exist_ok=True)
    scenario = repair_scenario()
    (out / "task.json").write_text(canonical_json(scenario.task.to_dict()), encoding="utf-8")
    scenario.world_spec.save(out / "world.json")
    for name, records in scenario.fixtures.items():
        save_replay_fixture(out / "fixtures" / f"{name}.jsonl", records)
    return out
