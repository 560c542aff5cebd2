"""HTTP surface: start runs, stream events, and resolve pending inspections.

The API is the only way the review console touches the engine. Feedback
resolution is exactly-once: concurrent duplicate posts yield one 200 and one
409, and an out-of-bounds break index is a 422 that leaves the entry
pending.
"""

from __future__ import annotations

import logging
import threading
import uuid
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import RedirectResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from ..core import Task
from ..loop import RunConfig, run
from ..service.metrics import RunSummary
from .queue import (
    AlreadyResolvedError,
    InspectionQueue,
    InvalidSubmissionError,
    UnknownInspectionError,
)
from .store import EventKind, RunStore, StoreError
from ..stages import GradientSubmission

logger = logging.getLogger(__name__)


class RunService:
    """Owns the store, the inspection queue, and one executor thread per run."""

    def __init__(self, runs_dir: str | Path) -> None:
        self.store = RunStore(runs_dir)
        self.queue = InspectionQueue()
        self._threads: dict[str, threading.Thread] = {}

    def start_run(self, task_data: dict, config_data: dict, run_id: Optional[str] = None) -> str:
        task = Task.from_dict(task_data)
        cfg = RunConfig.from_dict(config_data)
        run_id = run_id or uuid.uuid4().hex[:12]
        self.store.create_run(run_id, cfg)
        thread = threading.Thread(
            target=self._execute, args=(task, cfg, run_id), daemon=True, name=f"run-{run_id}"
        )
        self._threads[run_id] = thread
        thread.start()
        return run_id

    def _execute(self, task: Task, cfg: RunConfig, run_id: str) -> None:
        try:
            run(
                task,
                cfg,
                channel=self.queue,
                on_event=lambda event: self.store.persist_event(run_id, event),
                set_status=lambda status: self.store.set_status(run_id, status),
                run_id=run_id,
            )
        except Exception:
            # the failure is already recorded in the run_finished event
            logger.exception("run %s failed", run_id)

    def join(self, run_id: str, timeout: float = 30.0) -> None:
        thread = self._threads.get(run_id)
        if thread is not None:
            thread.join(timeout)


class RunRequest(BaseModel):
    task: dict
    config: dict = {}
    run_id: Optional[str] = None


class FeedbackBody(BaseModel):
    observed_failure: str
    downstream_manifestation: str
    earliest_break_index: int
    repair_instruction: str
    goal_score: Optional[float] = None


def _loss_series(record) -> list[dict]:
    series = []
    for event in record.events:
        if event.kind is EventKind.ACCEPTANCE_DECISION:
            series.append(
                {
                    "r": event.iteration,
                    "candidate_loss": event.payload["candidate_loss"],
                    "incumbent_loss": event.payload["incumbent_loss"],
                    "accepted": event.payload["accepted"],
                    "early_exit": event.payload.get("early_exit", False),
                }
            )
    return series


def create_app(service: RunService, console_dir: Optional[str | Path] = None) -> FastAPI:
    app = FastAPI(title="trajectory refinement service")

    @app.post("/runs", status_code=201)
    def create_run(body: RunRequest) -> dict:
        try:
            run_id = service.start_run(body.task, body.config, body.run_id)
        except (KeyError, ValueError, StoreError) as exc:
            raise HTTPException(status_code=422, detail=f"bad run request: {exc}")
        return {"run_id": run_id}

    @app.get("/runs/{run_id}")
    def get_run(run_id: str) -> dict:
        record = service.store.get(run_id)
        if record is None:
            raise HTTPException(status_code=404, detail="unknown run")
        latest_loss = None
        for event in reversed(record.events):
            if event.kind is EventKind.INSPECTION:
                latest_loss = event.payload["loss"]
                break
        summary = RunSummary.from_record(record)
        return {
            "run_id": run_id,
            "status": record.status.value,
            "latest_loss": latest_loss,
            "iterations": _loss_series(record),
            "goal_score": summary.goal_score if summary else None,
        }

    @app.get("/runs/{run_id}/events")
    def get_events(run_id: str, since: int = -1, wait: float = 0.0) -> dict:
        record = service.store.get(run_id)
        if record is None:
            raise HTTPException(status_code=404, detail="unknown run")
        if wait > 0:
            events = service.store.wait_for_events(run_id, since, min(wait, 30.0))
        else:
            events = service.store.events_since(run_id, since)
        return {
            "run_id": run_id,
            "status": service.store.get(run_id).status.value,
            "events": [e.to_dict() for e in events],
        }

    @app.get("/runs/{run_id}/loss-series")
    def get_loss_series(run_id: str) -> dict:
        record = service.store.get(run_id)
        if record is None:
            raise HTTPException(status_code=404, detail="unknown run")
        return {"run_id": run_id, "series": _loss_series(record)}

    @app.get("/inspections/pending")
    def pending_inspections() -> dict:
        return {"pending": [entry.to_dict() for entry in service.queue.pending()]}

    @app.post("/inspections/{inspection_id}/feedback")
    def resolve_inspection(inspection_id: str, body: FeedbackBody) -> dict:
        submission = GradientSubmission(
            observed_failure=body.observed_failure,
            downstream_manifestation=body.downstream_manifestation,
            earliest_break_index=body.earliest_break_index,
            repair_instruction=body.repair_instruction,
            goal_score=body.goal_score,
        )
        try:
            service.queue.resolve(inspection_id, submission)
        except UnknownInspectionError:
            raise HTTPException(status_code=404, detail="unknown inspection")
        except AlreadyResolvedError:
            raise HTTPException(status_code=409, detail="inspection already resolved")
        except InvalidSubmissionError as exc:
            raise HTTPException(status_code=422, detail=exc.errors)
        return {"status": "resolved", "inspection_id": inspection_id}

    if console_dir is not None and Path(console_dir).is_dir():
        console_path = Path(console_dir)

        @app.get("/")
        def console_root() -> RedirectResponse:
            return RedirectResponse(url="/console/")

        # html=True serves index.html at /console/, and the page's relative
        # ./dist/main.js resolves inside the same mount
        app.mount("/console", StaticFiles(directory=console_path, html=True), name="console")

    return app
