"""Scenarios, snapshot persistence and the command line."""

from .runner import run_simulation
from .scenario import Scenario, ScenarioError, build_table, dump_scenario, load_scenario
from .snapshot import (
    KnowledgeBase,
    SnapshotError,
    read_binary,
    read_snapshot,
    read_text,
    write_binary,
    write_snapshot,
    write_text,
)

__all__ = [
    "KnowledgeBase",
    "Scenario",
    "ScenarioError",
    "SnapshotError",
    "build_table",
    "dump_scenario",
    "load_scenario",
    "read_binary",
    "read_snapshot",
    "read_text",
    "run_simulation",
    "write_binary",
    "write_snapshot",
    "write_text",
]
