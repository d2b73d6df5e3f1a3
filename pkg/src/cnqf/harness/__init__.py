"""Discrete-event harness wiring the subsystems into runnable scenarios."""

from cnqf.harness.engine import Engine, Entity, Event
from cnqf.harness.scenario import (
    Injection,
    ScenarioResult,
    ScenarioSpec,
    inject_background_load,
    load_scenario_file,
    run_scenario,
    scenario_fig3,
    scenario_fig4,
)
from cnqf.harness.trace import TraceRecord, assert_milestones, format_trace, parse_trace

__all__ = [
    "Engine", "Entity", "Event", "Injection", "ScenarioResult", "ScenarioSpec", "TraceRecord",
    "assert_milestones", "format_trace", "inject_background_load", "load_scenario_file", "parse_trace",
    "run_scenario", "scenario_fig3", "scenario_fig4",
]
