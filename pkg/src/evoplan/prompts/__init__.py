"""Stage prompt texts, stored as plain assets so they stay diff-able."""

from __future__ import annotations

from importlib import resources

STAGES = ("plan", "inspect", "evolve", "verify")


def stage_prompt(stage: str) -> str:
    if stage not in STAGES:
        raise KeyError(f"unknown stage prompt: {stage}")
    return resources.files(__package__).joinpath(f"{stage}.txt").read_text(encoding="utf-8")
