"""Simulated network, fault injection, scheduling and scenario running."""

from .faults import FaultAction, FaultPlan, FaultRule, parse_rule
from .inspect import inspect
from .network import Envelope, Network, Transcript
from .runner import SCENARIOS, ScenarioConfig, Summary, run_scenario
from .scheduler import Scheduler, run_threaded

__all__ = [
    "SCENARIOS",
    "Envelope",
    "FaultAction",
    "FaultPlan",
    "FaultRule",
    "Network",
    "ScenarioConfig",
    "Scheduler",
    "Summary",
    "Transcript",
    "inspect",
    "parse_rule",
    "run_scenario",
    "run_threaded",
]
