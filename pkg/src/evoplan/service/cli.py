"""Command line entry points: run, serve, replay, metrics, scenario.

Exit codes: 0 on success, 1 on run failure, 2 on configuration errors
(bad files, unresolvable backends, conflicting flags).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from ..core import EngineError, Task, canonical_json
from ..gateway import resolve_backend
from ..loop import RunConfig, RunFailure, run
from ..microworld import resolve_environment, write_scenario_bundle
from ..stages import Regime, StageConfig
from .metrics import RunSummary, extra_tokens
from .store import Event, EventLogWriter, load_run_log

WALL_TIME_IGNORED = None


def _fail_config(message: str) -> None:
    click.echo(f"config error: {message}", err=True)
    sys.exit(2)


@click.group()
def main() -> None:
    """Trajectory-refinement engine."""


@main.command("run")
@click.option("--task", "task_file", required=True, type=click.Path(), help="task JSON file")
@click.option("--env", "env_ref", default=None, help="environment ref (microworld:<file> | toolworld)")
@click.option("--model", "model_ref", default=None, help="model ref (scripted:<fixture> | http:<cfg>)")
@click.option("--mode", type=click.Choice(["auto", "hitl"]), default=None)
@click.option("--pool", "pool_size", type=int, default=None, help="plan pool size M")
@click.option("--iters", "max_iterations", type=int, default=None, help="refinement iterations R")
@click.option("--threshold", type=float, default=None, help="divergence threshold T")
@click.option("--seed", type=int, default=None)
@click.option("--no-plan", is_flag=True, help="disable the planning stage")
@click.option("--no-inspect", is_flag=True, help="disable inspection feedback")
@click.option("--no-evolve", is_flag=True, help="disable plan revision")
@click.option("--no-verify", is_flag=True, help="disable final verification")
@click.option("--feedback-timeout", type=float, default=None, help="hitl feedback deadline, seconds")
@click.option("--backbone", default=None, help="backbone tag for token metrics")
@click.option("--config", "config_file", type=click.Path(), default=None, help="engine config JSON")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="directory for the event log")
def run_command(
    task_file,
    env_ref,
    model_ref,
    mode,
    pool_size,
    max_iterations,
    threshold,
    seed,
    no_plan,
    no_inspect,
    no_evolve,
    no_verify,
    feedback_timeout,
    backbone,
    config_file,
    out_dir,
) -> None:
    """Execute one refinement run against a task file."""
    if mode == "hitl" and no_inspect:
        _fail_config("--mode hitl requires the inspect stage (--no-inspect conflicts)")

    base: dict = {}
    if config_file:
        try:
            base = json.loads(Path(config_file).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            _fail_config(f"cannot read config file: {exc}")

    overrides = {
        "pool_size": pool_size,
        "max_iterations": max_iterations,
        "divergence_threshold": threshold,
        "seed": seed,
        "model_ref": model_ref,
        "env_ref": env_ref,
        "feedback_timeout": feedback_timeout,
        "backbone": backbone,
    }
    for key, value in overrides.items():
        if value is not None:
            base[key] = value

    stages = StageConfig.from_dict(base.get("stages", {}))
    if mode is not None:
        stages = StageConfig(
            enabled=dict(stages.enabled),
            inspect_interval=stages.inspect_interval,
            evolve_cap=stages.evolve_cap,
            regime=Regime(mode),
        )
    disabled = [
        name
        for name, flag in
        [("plan", no_plan), ("inspect", no_inspect), ("evolve", no_evolve), ("verify", no_verify)]
        if flag
    ]
    if disabled:
        stages = stages.with_disabled(*disabled)
    base["stages"] = stages.to_dict()

    try:
        cfg = RunConfig.from_dict(base)
    except (ValueError, KeyError) as exc:
        _fail_config(str(exc))

    try:
        task = Task.from_dict(json.loads(Path(task_file).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        _fail_config(f"cannot load task: {exc}")

    try:
        model = resolve_backend(cfg.model_ref)
        env = resolve_environment(cfg.env_ref)
    except (EngineError, OSError) as exc:
        _fail_config(f"cannot resolve backend/environment: {exc}")

    run_id = f"run-{task.id}-s{cfg.seed}"
    writer = None
    if out_dir:
        log_path = Path(out_dir) / f"{run_id}.jsonl"
        if log_path.exists():
            log_path.unlink()  # deterministic reruns replace the previous log
        writer = EventLogWriter(log_path, run_id)

    try:
        result = run(
            task,
            cfg,
            model=model,
            env=env,
            on_event=writer.append if writer else None,
            run_id=run_id,
        )
    except RunFailure as exc:
        click.echo(f"run failed: {exc}", err=True)
        sys.exit(1)
    finally:
        if writer:
            writer.close()

    final = result.record.events[-1].payload
    click.echo(f"run {run_id}: goal_score={final['goal_score']} "
               f"billed_tokens={final['billed_tokens']} iterations={final['iterations']}")
    if result.report is not None:
        click.echo(result.report.render())
    if writer:
        click.echo(f"event log: {writer.path}")


@main.command("serve")
@click.option("--port", type=int, default=8321)
@click.option("--host", default="127.0.0.1")
@click.option("--runs-dir", type=click.Path(), default="./runs")
@click.option("--console-dir", type=click.Path(), default=None, help="built console assets to host")
def serve_command(port, host, runs_dir, console_dir) -> None:
    """Host the HTTP API (and the review console, when built)."""
    import uvicorn

    from .api import RunService, create_app

    service = RunService(runs_dir)
    app = create_app(service, console_dir=console_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _stripped(events: list[Event]) -> list[dict]:
    return [{**event.to_dict(), "wall_time": WALL_TIME_IGNORED} for event in events]


@main.command("replay")
@click.option("--run", "log_file", required=True, type=click.Path(), help="stored event log")
def replay_command(log_file) -> None:
    """Re-execute a logged run against its fixtures and diff the events."""
    try:
        header, recorded = load_run_log(log_file)
    except (OSError, EngineError, ValueError) as exc:
        _fail_config(f"cannot load run log: {exc}")
    if not recorded or recorded[0].kind.value != "run_started":
        _fail_config("log has no run_started event to replay from")
    payload = recorded[0].payload
    task = Task.from_dict(payload["task"])
    cfg = RunConfig.from_dict(payload["config"])
    try:
        model = resolve_backend(cfg.model_ref)
        env = resolve_environment(cfg.env_ref)
    except (EngineError, OSError) as exc:
        _fail_config(f"cannot resolve recorded backend/environment: {exc}")

    try:
        result = run(task, cfg, model=model, env=env, run_id=header["run_id"])
    except RunFailure as exc:
        click.echo(f"replay run failed: {exc}", err=True)
        sys.exit(1)

    original = _stripped(recorded)
    replayed = _stripped(result.record.events)
    if original == replayed:
        click.echo(f"replay identical: {len(replayed)} events")
        return
    click.echo("replay diverged:", err=True)
    for index, (old, new) in enumerate(zip(original, replayed)):
        if old != new:
            click.echo(f"  first divergence at seq {index}:", err=True)
            click.echo(f"    recorded: {canonical_json(old)[:300]}", err=True)
            click.echo(f"    replayed: {canonical_json(new)[:300]}", err=True)
            break
    if len(original) != len(replayed):
        click.echo(f"  event counts differ: {len(original)} recorded vs {len(replayed)} replayed", err=True)
    sys.exit(1)


@main.group("metrics")
def metrics_group() -> None:
    """Run-log analytics."""


@metrics_group.command("extra-tokens")
@click.option("--method", "method_dir", required=True, type=click.Path())
@click.option("--baseline", "baseline_dir", required=True, type=click.Path())
@click.option("--threshold", type=float, default=0.7, show_default=True, help="solved-case goal score")
def extra_tokens_command(method_dir, baseline_dir, threshold) -> None:
    """Median-of-medians extra billed tokens on solved cases."""

    def summaries(directory):
        out = []
        for path in sorted(Path(directory).glob("*.jsonl")):
            _, events = load_run_log(path)
            summary = RunSummary.from_events(events)
            if summary is not None:
                out.append(summary)
        return out

    try:
        method = summaries(method_dir)
        baseline = summaries(baseline_dir)
    except (OSError, EngineError, ValueError) as exc:
        _fail_config(f"cannot read run logs: {exc}")
    result = extra_tokens(method, baseline, solved_threshold=threshold)
    click.echo(canonical_json(result.to_dict()))


@main.command("scenario")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="bundle directory")
def scenario_command(out_dir) -> None:
    """Write the canned repair-scenario bundle (task, world, fixtures, requests)."""
    out = Path(out_dir)
    write_scenario_bundle(out)
    base = out.resolve()
    requests = {
        "auto": {"stages": {}, "feedback_timeout": 0.0},
        "hitl": {"stages": {"regime": "hitl"}, "feedback_timeout": 120.0},
        "no_evolve": {"stages": {"enabled": {"evolve": False}}},
        "react": {
            "stages": {"enabled": {s: False for s in ("plan", "inspect", "evolve", "verify")}}
        },
    }
    task_data = json.loads((out / "task.json").read_text(encoding="utf-8"))
    for name, config in requests.items():
        config = dict(config)
        config["model_ref"] = f"scripted:{base / 'fixtures' / (name + '.jsonl')}"
        config["env_ref"] = f"microworld:{base / 'world.json'}"
        config["seed"] = 7
        request = {"task": task_data, "config": config}
        (out / f"request_{name}.json").write_text(canonical_json(request), encoding="utf-8")
    click.echo(f"scenario bundle written to {out}")


if __name__ == "__main__":
    main()
