"""Scenario definition, raycast sensor and detection oracle."""

from coopsim.world.scenario import (
    Actor,
    BodyState,
    EgoSpec,
    Lane,
    Scenario,
    ScenarioError,
    SenderSpec,
    StopLine,
    load_scenario,
    parse_scenario,
)
from coopsim.world.sensor import (
    ACTOR,
    BOUNDARY,
    MISS,
    PointScan,
    SensorConfig,
    build_dynamic_mask,
    detect_objects,
    in_mask,
    nms_distance,
    raycast_scan,
)

__all__ = [
    "ACTOR",
    "BOUNDARY",
    "MISS",
    "Actor",
    "BodyState",
    "EgoSpec",
    "Lane",
    "PointScan",
    "Scenario",
    "ScenarioError",
    "SenderSpec",
    "SensorConfig",
    "StopLine",
    "build_dynamic_mask",
    "detect_objects",
    "in_mask",
    "load_scenario",
    "nms_distance",
    "parse_scenario",
    "raycast_scan",
]
