from __future__ import annotations

import threading
import time

import pytest
from fastapi.testclient import TestClient

from evoplan.microworld import write_scenario_bundle
from evoplan.service.api import RunService, create_app
from evoplan.service.queue import AlreadyResolvedError, InspectionQueue
from evoplan.stages import GradientSubmission

import json


@pytest.fixture
def bundle(tmp_path):
    out = write_scenario_bundle(tmp_path / "bundle")
    return out


@pytest.fixture
def client(tmp_path):
    service = RunService(tmp_path / "runs")
    app = create_app(service)
    with TestClient(app) as test_client:
        test_client.service = service
        yield test_client


def hitl_request(bundle, timeout=30.0):
    task = json.loads((bundle / "task.json").read_text())
    return {
        "task": task,
        "config": {
            "model_ref": f"scripted:{bundle / 'fixtures' / 'hitl.jsonl'}",
            "env_ref": f"microworld:{bundle / 'world.json'}",
            "seed": 7,
            "feedback_timeout": timeout,
            "stages": {"regime": "hitl"},
        },
    }


def wait_for_pending(client, deadline=10.0):
    end = time.monotonic() + deadline
    while time.monotonic() < end:
        pending = client.get("/inspections/pending").json()["pending"]
        if pending:
            return pending[0]
        time.sleep(0.02)
    raise AssertionError("no pending inspection appeared")


def wait_for_status(client, run_id, wanted, deadline=10.0):
    end = time.monotonic() + deadline
    while time.monotonic() < end:
        status = client.get(f"/runs/{run_id}").json()["status"]
        if status == wanted:
            return
        time.sleep(0.02)
    raise AssertionError(f"run never reached status {wanted}")


GOOD_FEEDBACK = {
    "observed_failure": "C4 unmet: the must-eat restaurant is missing",
    "downstream_manifestation": "lunch booking failed after the lookup returned not found",
    "earliest_break_index": 3,
    "repair_instruction": "query the indexed variant name and book it",
    "goal_score": 0.75,
}


class TestFeedbackLoop:
    def test_full_hitl_run_through_the_api(self, client, bundle):
        response = client.post("/runs", json=hitl_request(bundle))
        assert response.status_code == 201
        run_id = response.json()["run_id"]

        pending = wait_for_pending(client)
        assert pending["run_id"] == run_id
        assert pending["packet"]["computed_break_index"] == 3
        assert pending["packet"]["constraint_verdicts"]["C4"] == "violated"
        assert pending["packet"]["constraint_verdicts"]["C1"] == "satisfied"
        inspection_id = pending["inspection_id"]
        wait_for_status(client, run_id, "awaiting_feedback")

        # out-of-bounds index: 422 and the entry stays pending
        bad = dict(GOOD_FEEDBACK, earliest_break_index=99)
        response = client.post(f"/inspections/{inspection_id}/feedback", json=bad)
        assert response.status_code == 422
        assert client.get("/inspections/pending").json()["pending"]

        response = client.post(f"/inspections/{inspection_id}/feedback", json=GOOD_FEEDBACK)
        assert response.status_code == 200

        # duplicate resolution: second post conflicts
        response = client.post(f"/inspections/{inspection_id}/feedback", json=GOOD_FEEDBACK)
        assert response.status_code == 409

        wait_for_status(client, run_id, "finished")
        events = client.get(f"/runs/{run_id}/events").json()["events"]
        kinds = [e["kind"] for e in events]
        assert "evolution" in kinds and "verification" in kinds
        evolution = next(e for e in events if e["kind"] == "evolution")
        # the operator's gradient fields appear verbatim in the evolution event
        gradient = evolution["payload"]["gradient"]
        assert gradient["observed_failure"] == GOOD_FEEDBACK["observed_failure"]
        assert gradient["repair_instruction"] == GOOD_FEEDBACK["repair_instruction"]
        assert gradient["source"] == "hitl"
        verification = next(e for e in events if e["kind"] == "verification")
        assert all(item["satisfied"] for item in verification["payload"]["report"]["items"])

    def test_unknown_inspection_404(self, client):
        response = client.post("/inspections/nonexistent/feedback", json=GOOD_FEEDBACK)
        assert response.status_code == 404

    def test_empty_field_is_422(self, client, bundle):
        client.post("/runs", json=hitl_request(bundle))
        pending = wait_for_pending(client)
        bad = dict(GOOD_FEEDBACK, repair_instruction="   ")
        response = client.post(f"/inspections/{pending['inspection_id']}/feedback", json=bad)
        assert response.status_code == 422
        client.post(f"/inspections/{pending['inspection_id']}/feedback", json=GOOD_FEEDBACK)


class TestRunEndpoints:
    def _finished_run(self, client, bundle):
        request = hitl_request(bundle)
        request["config"]["stages"] = {"regime": "auto"}
        request["config"]["model_ref"] = f"scripted:{bundle / 'fixtures' / 'auto.jsonl'}"
        run_id = client.post("/runs", json=request).json()["run_id"]
        wait_for_status(client, run_id, "finished")
        return run_id

    def test_unknown_run_404(self, client):
        assert client.get("/runs/ghost").status_code == 404
        assert client.get("/runs/ghost/events").status_code == 404
        assert client.get("/runs/ghost/loss-series").status_code == 404

    def test_run_summary_and_loss_series(self, client, bundle):
        run_id = self._finished_run(client, bundle)
        summary = client.get(f"/runs/{run_id}").json()
        assert summary["status"] == "finished"
        assert summary["goal_score"] == 1.0
        series = client.get(f"/runs/{run_id}/loss-series").json()["series"]
        assert [entry["accepted"] for entry in series] == [True, False]
        assert series[1]["early_exit"] is True
        assert series[0]["candidate_loss"]["goal_loss"] == 0.0
        assert series[0]["incumbent_loss"]["goal_loss"] == 0.25

    def test_events_since_filters(self, client, bundle):
        run_id = self._finished_run(client, bundle)
        all_events = client.get(f"/runs/{run_id}/events").json()["events"]
        later = client.get(f"/runs/{run_id}/events", params={"since": 5}).json()["events"]
        assert [e["seq"] for e in later] == [e["seq"] for e in all_events if e["seq"] > 5]

    def test_long_poll_after_finish_returns_immediately(self, client, bundle):
        run_id = self._finished_run(client, bundle)
        last_seq = client.get(f"/runs/{run_id}/events").json()["events"][-1]["seq"]
        started = time.monotonic()
        response = client.get(
            f"/runs/{run_id}/events", params={"since": last_seq, "wait": 5.0}
        )
        assert time.monotonic() - started < 2.0
        assert response.json()["events"] == []
        assert response.json()["status"] == "finished"

    def test_bad_run_request_is_422(self, client):
        response = client.post("/runs", json={"task": {"id": "", "goal_text": "g"}})
        assert response.status_code == 422


class TestConsoleHosting:
    def test_console_served_with_working_asset_paths(self, tmp_path, bundle):
        console = tmp_path / "console"
        (console / "dist").mkdir(parents=True)
        (console / "index.html").write_text(
            '<html><script type="module" src="./dist/main.js"></script></html>'
        )
        (console / "dist" / "main.js").write_text("export {}")
        service = RunService(tmp_path / "runs2")
        app = create_app(service, console_dir=console)
        with TestClient(app) as client:
            root = client.get("/", follow_redirects=False)
            assert root.status_code in (302, 307)
            assert root.headers["location"] == "/console/"
            index = client.get("/console/")
            assert index.status_code == 200
            assert "dist/main.js" in index.text
            # the page's relative script path resolves inside the mount
            assert client.get("/console/dist/main.js").status_code == 200


class TestConcurrentRuns:
    def test_two_hitl_runs_have_independent_pending_entries(self, client, bundle):
        first = client.post("/runs", json=hitl_request(bundle)).json()["run_id"]
        second = client.post("/runs", json=hitl_request(bundle)).json()["run_id"]

        def pending_runs():
            return {p["run_id"] for p in client.get("/inspections/pending").json()["pending"]}

        end = time.time() + 10
        while pending_runs() != {first, second} and time.time() < end:
            time.sleep(0.02)
        assert pending_runs() == {first, second}

        # resolving one run's inspection leaves the other pending
        entries = client.get("/inspections/pending").json()["pending"]
        target = next(e for e in entries if e["run_id"] == first)
        assert client.post(
            f"/inspections/{target['inspection_id']}/feedback", json=GOOD_FEEDBACK
        ).status_code == 200
        remaining = pending_runs()
        assert second in remaining and first not in remaining
        other = next(
            e for e in client.get("/inspections/pending").json()["pending"]
            if e["run_id"] == second
        )
        client.post(f"/inspections/{other['inspection_id']}/feedback", json=GOOD_FEEDBACK)
        wait_for_status(client, first, "finished")
        wait_for_status(client, second, "finished")


class TestQueueInvariants:
    def test_one_pending_inspection_per_run(self):
        from evoplan.core import ExecutionTrace
        from evoplan.loss import LossBreakdown
        from evoplan.microworld import repair_scenario
        from evoplan.service.queue import QueueError
        from evoplan.stages import ReviewPacket

        scenario = repair_scenario()

        def packet(inspection_id):
            return ReviewPacket(
                inspection_id=inspection_id,
                run_id="same-run",
                task=scenario.task,
                planned=None,
                trace=ExecutionTrace((), None),
                loss=LossBreakdown(0.5, 0.0, 1, 0.5),
                computed_break_index=None,
            )

        queue = InspectionQueue()
        queue.post(packet("first"), deadline=time.time() + 60)
        with pytest.raises(QueueError):
            queue.post(packet("second"), deadline=time.time() + 60)
        # resolving the first frees the run for the next inspection
        queue.resolve("first", GradientSubmission("a", "b", 0, "c"))
        queue.post(packet("second"), deadline=time.time() + 60)


class TestExactlyOnceResolution:
    def test_concurrent_duplicate_resolution(self, bundle):
        # drive the queue directly with two racing submitters
        from evoplan.loss import LossBreakdown
        from evoplan.microworld import repair_scenario
        from evoplan.stages import ReviewPacket
        from evoplan.core import ExecutionTrace

        scenario = repair_scenario()
        packet = ReviewPacket(
            inspection_id="race-1",
            run_id="r",
            task=scenario.task,
            planned=None,
            trace=ExecutionTrace((), None),
            loss=LossBreakdown(0.25, 0.25, 4, 0.5, 3),
            computed_break_index=None,
        )
        queue = InspectionQueue()
        queue.post(packet, deadline=time.time() + 60)
        submission = GradientSubmission("a", "b", 0, "c")
        outcomes = []
        barrier = threading.Barrier(2)

        def submit():
            barrier.wait()
            try:
                queue.resolve("race-1", submission)
                outcomes.append("ok")
            except AlreadyResolvedError:
                outcomes.append("conflict")

        threads = [threading.Thread(target=submit) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(outcomes) == ["conflict", "ok"]
