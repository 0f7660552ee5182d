"""Action-management runtime for robot policy control loops, with a
deterministic simulated arm and synthetic policy."""
from .core import ActionSlice, ActionStep, ExceptionKind, Limits, Observation, RobotState
from .errors import (
    AMSError,
    CapacityError,
    CollisionError,
    ConfigError,
    EmptyBuffer,
    HandlerFailure,
    PolicyError,
    UnknownBlob,
    UnknownId,
)
from .harness import Scenario, load_scenario, replay_trace, run_episode, run_suite, scenario_from_dict

__version__ = "0.1.0"

__all__ = [
    "AMSError", "ActionSlice", "ActionStep", "CapacityError", "CollisionError", "ConfigError", "EmptyBuffer",
    "ExceptionKind", "HandlerFailure", "Limits", "Observation", "PolicyError", "RobotState", "Scenario",
    "UnknownBlob", "UnknownId", "load_scenario", "replay_trace", "run_episode", "run_suite",
    "scenario_from_dict",
]
