from __future__ import annotations

import copy
from typing import Any

import pytest

from coopsim.world.scenario import Scenario, parse_scenario


def rect(x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def scenario_table(
    *,
    boundaries: list[list[list[float]]] | None = None,
    actors: list[dict[str, Any]] | None = None,
    duration: float = 4.0,
    limit: float = 10.0,
    start_v: float = 10.0,
    **extra: Any,
) -> dict[str, Any]:
    """A straight 200 m west-to-east road with optional walls and actors."""
    table: dict[str, Any] = {
        "name": "unit",
        "sim": {"duration_s": duration, "tick_s": 0.1, "seed": 0},
        "map": {
            "lanes": [{"id": "main", "polyline_m": [[-100.0, 0.0], [100.0, 0.0]], "speed_limit_mps": limit}],
            "stoplines": [],
            "boundaries": [{"polyline_m": b} for b in (boundaries or [])],
        },
        "actors": actors or [],
        "ego": {"id": 1, "route": ["main"], "start_s_m": 20.0, "start_v_mps": start_v, "size_lwh_m": [4.5, 1.9, 1.5]},
        "senders": [],
    }
    table.update(copy.deepcopy(extra))
    return table


def static_actor(aid: str, x: float, y: float, yaw: float = 0.0, duration: float = 4.0, size=(4.5, 1.9, 1.5)) -> dict[str, Any]:
    return {
        "id": aid,
        "class": "car",
        "size_lwh_m": list(size),
        "trajectory": [
            {"t_s": 0.0, "x_m": x, "y_m": y, "yaw_rad": yaw},
            {"t_s": duration, "x_m": x, "y_m": y, "yaw_rad": yaw},
        ],
    }


def make_scenario(**kw: Any) -> Scenario:
    return parse_scenario(scenario_table(**kw))


@pytest.fixture
def room() -> Scenario:
    """20 x 20 m closed room centred on the origin (lane inside for the bounding box)."""
    return make_scenario(boundaries=[rect(-10, -10, 10, 10)])


def pytest_terminal_summary(terminalreporter) -> None:
    """Repeat the acceptance verdict lines at the end of the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n].splitlines()[0])
