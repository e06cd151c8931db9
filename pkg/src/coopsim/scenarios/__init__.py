"""Reconstructed occluded-intersection scenarios and their TOML writer.

Each archetype puts a building between the ego's approach and a crossing
vehicle, and parks a cooperating vehicle where it can see the crossing
road. Geometry and timing are engineering reconstructions: roads run
along the axes with lane centers at +-1.75 m and corner buildings set
back 6 m from the road axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

LANE = 1.75
SETBACK = 6.0
BLOCK = 40.0
ROAD_LEN = 75.0
ARC_STEP = 0.5


@dataclass(frozen=True)
class Archetype:
    name: str
    description: str
    layout: str  # "cross" or "tee"
    turn: str  # "left", "right" or "straight"
    actor_from: str  # "west" or "east"
    actor_y: float  # lateral line the crossing actor travels on
    sender_xy: tuple[float, float]
    sender_yaw: float
    actor_class: str = "car"
    actor_size: tuple[float, float, float] = (4.5, 1.9, 1.5)
    actor_speed: float = 10.0
    ego_speed: float = 10.0
    max_range: float = 80.0
    duration: float = 8.0


CYCLIST = {"actor_class": "cyclist", "actor_size": (1.8, 0.7, 1.7), "actor_speed": 6.0}

ARCHETYPES: tuple[Archetype, ...] = (
    Archetype(
        "intersection_left",
        "Four-way intersection, ego turns left; a car from the west is hidden by the south-west building.",
        "cross", "left", "west", -LANE, (-16.0, -4.75), 0.0,
    ),
    Archetype(
        "intersection_right",
        "Four-way intersection, ego turns right; a cyclist on the crossing path from the east is hidden by the south-east building.",
        "cross", "right", "east", -4.75, (16.0, 4.75), math.pi, **CYCLIST,
    ),
    Archetype(
        "t_left",
        "T-intersection, ego turns left across the near lane; a car from the west is hidden by the south-west building.",
        "tee", "left", "west", -LANE, (-16.0, -4.75), 0.0, actor_speed=8.0, ego_speed=9.0,
    ),
    Archetype(
        "t_right",
        "T-intersection, ego turns right; a slow cyclist on the crossing path from the east is hidden by the south-east building.",
        "tee", "right", "east", -4.75, (16.0, 4.75), math.pi, **{**CYCLIST, "actor_speed": 5.0},
    ),
    Archetype(
        "low_visibility_crossing",
        "Four-way intersection in fog (35 m sensing range), ego goes straight; a car from the west crosses.",
        "cross", "straight", "west", -LANE, (-16.0, -4.75), 0.0, max_range=35.0,
    ),
)


def _rect(x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]


def _buildings(layout: str) -> list[list[list[float]]]:
    s, b = SETBACK, SETBACK + BLOCK
    walls = [_rect(-b, -b, -s, -s), _rect(s, -b, b, -s)]
    if layout == "cross":
        walls += [_rect(-b, s, -s, b), _rect(s, s, b, b)]
    else:
        walls.append([[-b, s], [b, s]])  # continuous frontage closing the T
    # kerbside posts give the matcher features along the roads
    for x in (-30.0, -20.0, 20.0, 30.0):
        walls.append(_rect(x - 0.3, -s + 2.0, x + 0.3, -s + 2.6))
    for y in (-30.0, -20.0):
        walls.append(_rect(-s + 2.0, y - 0.3, -s + 2.6, y + 0.3))
        walls.append(_rect(s - 2.6, y - 0.3, s - 2.0, y + 0.3))
    return walls


def _arc(center: tuple[float, float], radius: float, a0: float, a1: float) -> list[list[float]]:
    n = max(int(math.ceil(abs(a1 - a0) * radius / ARC_STEP)), 2)
    ang = np.linspace(a0, a1, n + 1)
    return [[round(center[0] + radius * math.cos(a), 6), round(center[1] + radius * math.sin(a), 6)] for a in ang]


def _ego_lanes(turn: str) -> list[dict[str, Any]]:
    """Approach, turn and exit lanes of the ego route."""
    if turn == "left":
        r = 9.0
        y0 = LANE - r
        arc = _arc((LANE - r, y0), r, 0.0, math.pi / 2)
        exit_ = [[LANE - r, LANE], [-ROAD_LEN, LANE]]
    elif turn == "right":
        r = 6.0
        y0 = -LANE - r
        arc = _arc((LANE + r, y0), r, math.pi, math.pi / 2)
        exit_ = [[LANE + r, -LANE], [ROAD_LEN, -LANE]]
    else:
        y0 = -SETBACK
        arc = [[LANE, y0], [LANE, SETBACK]]
        exit_ = [[LANE, SETBACK], [LANE, ROAD_LEN]]
    approach = [[LANE, -ROAD_LEN], [LANE, y0]]
    lanes = [
        {"id": "approach", "polyline_m": approach, "speed_limit_mps": 10.0},
        {"id": "turn", "polyline_m": arc, "speed_limit_mps": 10.0},
        {"id": "exit", "polyline_m": exit_, "speed_limit_mps": 10.0},
    ]
    return lanes


def _cross_lanes(layout: str) -> list[dict[str, Any]]:
    lanes = [
        {"id": "west_east", "polyline_m": [[-ROAD_LEN, -LANE], [ROAD_LEN, -LANE]], "speed_limit_mps": 12.0},
        {"id": "east_west", "polyline_m": [[ROAD_LEN, LANE], [-ROAD_LEN, LANE]], "speed_limit_mps": 12.0},
    ]
    if layout == "cross":
        lanes.append({"id": "north_south", "polyline_m": [[-LANE, ROAD_LEN], [-LANE, -ROAD_LEN]], "speed_limit_mps": 8.0})
    return lanes


def _conflict_point(lanes: list[dict[str, Any]], actor_y: float) -> tuple[float, float]:
    """Arc length along the ego route, and x, where its centerline first meets the actor's lane line."""
    s = 0.0
    for lane in lanes:
        pts = np.asarray(lane["polyline_m"], dtype=float)
        for p, q in zip(pts[:-1], pts[1:]):
            seg = float(np.linalg.norm(q - p))
            if (p[1] - actor_y) * (q[1] - actor_y) <= 0 and abs(q[1] - p[1]) > 1e-12:
                f = (actor_y - p[1]) / (q[1] - p[1])
                return s + f * seg, float(p[0] + f * (q[0] - p[0]))
            s += seg
    raise ValueError("ego route never meets the actor lane")


def build(arch: Archetype) -> dict[str, Any]:
    """Scenario table for one archetype, ready for TOML serialization."""
    ego_lanes = _ego_lanes(arch.turn)
    actor_y = arch.actor_y
    heading = 0.0 if arch.actor_from == "west" else math.pi
    s_conf, conflict_x = _conflict_point(ego_lanes, actor_y)
    # place the ego so that at constant speed it reaches the conflict together with the actor
    t_conf = 5.0
    start_s = s_conf - arch.ego_speed * t_conf
    actor_x0 = -arch.actor_speed * t_conf if arch.actor_from == "west" else arch.actor_speed * t_conf
    actor_x0 += conflict_x
    rows = []
    for k in range(int(round(arch.duration / 0.5)) + 1):
        t = 0.5 * k
        d = arch.actor_speed * t * (1.0 if arch.actor_from == "west" else -1.0)
        rows.append({"t_s": t, "x_m": round(actor_x0 + d, 6), "y_m": actor_y, "yaw_rad": heading})
    sx, sy = arch.sender_xy
    table: dict[str, Any] = {
        "name": arch.name,
        "description": arch.description + " Reconstructed geometry, not a published layout.",
        "sim": {"duration_s": arch.duration, "tick_s": 0.1, "seed": 0},
        "map": {
            "lanes": ego_lanes + _cross_lanes(arch.layout),
            "stoplines": [],
            "boundaries": [{"polyline_m": w} for w in _buildings(arch.layout)],
        },
        "actors": [
            {"id": "crossing", "class": arch.actor_class, "size_lwh_m": list(arch.actor_size), "trajectory": rows},
            {
                "id": "helper",
                "class": "car",
                "size_lwh_m": [4.5, 1.9, 1.5],
                "trajectory": [
                    {"t_s": 0.0, "x_m": sx, "y_m": sy, "yaw_rad": arch.sender_yaw},
                    {"t_s": arch.duration, "x_m": sx, "y_m": sy, "yaw_rad": arch.sender_yaw},
                ],
            },
        ],
        "ego": {"id": 1, "route": ["approach", "turn", "exit"], "start_s_m": round(start_s, 3), "start_v_mps": arch.ego_speed, "size_lwh_m": [4.5, 1.9, 1.5]},
        "senders": [{"id": 2, "actor": "helper", "trust": 1.0}],
        "planner": {"a_lat_max_mps2": 3.0},
    }
    if arch.max_range != 80.0:
        table["sensor"] = {"max_range_m": arch.max_range}
    return table


def to_toml(table: dict[str, Any]) -> str:
    return tomli_w.dumps(table)


def data_dir() -> Path:
    """Directory of the shipped scenario files."""
    return Path(str(resources.files("coopsim.scenarios") / "data"))


def shipped() -> list[Path]:
    return sorted(data_dir().glob("*.toml"))


def write_all(out: str | Path) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for arch in ARCHETYPES:
        p = out / f"{arch.name}.toml"
        p.write_text(to_toml(build(arch)), encoding="utf-8")
        paths.append(p)
    return paths
