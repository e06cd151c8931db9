"""Scenario model and TOML loader.

File layout (every numeric key carries a unit suffix)::

    [sim]      duration_s, tick_s, seed
    [map]      lanes = [{id, polyline_m, speed_limit_mps}]
               stoplines = [{lane_id, s_m}]
               boundaries = [{polyline_m}]
    [[actors]] id, class, size_lwh_m, trajectory = [{t_s, x_m, y_m, yaw_rad}]
    [ego]      id, route, start_s_m, start_v_mps, size_lwh_m
    [[senders]] id, actor, trust
    [planner], [sensor], [link], [fusion]   optional overrides
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from coopsim.core import ArcLengthPath, ObjectClass, ValidationError, box_corners, wrap_angles


class ScenarioError(ValidationError):
    """Scenario file failed validation; ``where`` names the offending field or line."""

    def __init__(self, where: str, message: str) -> None:
        super().__init__(f"{where}: {message}")
        self.where = where


@dataclass(frozen=True, eq=False)
class Lane:
    id: str
    polyline: np.ndarray
    speed_limit: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.polyline, axis=0), axis=1).sum())


@dataclass(frozen=True)
class StopLine:
    lane_id: str
    s: float


@dataclass(frozen=True, eq=False)
class Actor:
    """Scripted box agent; ``trajectory`` rows are (t_s, x, y, yaw)."""

    id: str
    class_id: ObjectClass
    size: tuple[float, float, float]
    trajectory: np.ndarray

    def state(self, t: float) -> BodyState | None:
        traj = self.trajectory
        if t < traj[0, 0] - 1e-9 or t > traj[-1, 0] + 1e-9:
            return None
        if len(traj) == 1:
            x, y, yaw = traj[0, 1:]
            return BodyState(self.id, self.class_id, self.size, float(x), float(y), float(yaw), 0.0, 0.0)
        i = int(np.clip(np.searchsorted(traj[:, 0], t, side="right") - 1, 0, len(traj) - 2))
        t0, t1 = traj[i, 0], traj[i + 1, 0]
        f = (t - t0) / (t1 - t0)
        x = traj[i, 1] + f * (traj[i + 1, 1] - traj[i, 1])
        y = traj[i, 2] + f * (traj[i + 1, 2] - traj[i, 2])
        dyaw = float(wrap_angles(traj[i + 1, 3] - traj[i, 3]))
        yaw = traj[i, 3] + f * dyaw
        vx = (traj[i + 1, 1] - traj[i, 1]) / (t1 - t0)
        vy = (traj[i + 1, 2] - traj[i, 2]) / (t1 - t0)
        return BodyState(self.id, self.class_id, self.size, float(x), float(y), float(yaw), float(vx), float(vy))


@dataclass(frozen=True)
class BodyState:
    """Ground-truth box of any vehicle at one instant (world frame)."""

    id: str
    class_id: ObjectClass
    size: tuple[float, float, float]
    x: float
    y: float
    yaw: float
    vx: float
    vy: float

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.size[0], self.size[1], self.yaw)


@dataclass(frozen=True)
class EgoSpec:
    id: int
    route: tuple[str, ...]
    start_s: float
    start_v: float
    size: tuple[float, float, float] = (4.5, 1.9, 1.6)


@dataclass(frozen=True)
class SenderSpec:
    """Cooperating vehicle; its body and motion are those of scripted actor ``actor``."""

    id: int
    actor: str
    trust: float = 1.0


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    lanes: dict[str, Lane]
    stoplines: tuple[StopLine, ...]
    boundaries: tuple[np.ndarray, ...]
    actors: tuple[Actor, ...]
    ego: EgoSpec
    senders: tuple[SenderSpec, ...]
    duration: float
    tick: float
    seed: int = 0
    overrides: dict[str, dict[str, Any]] = field(default_factory=dict)
    description: str = ""

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.tick)) + 1

    def boundary_segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Static wall segments as (start, end) arrays of shape (M, 2)."""
        if not self.boundaries:
            return np.zeros((0, 2)), np.zeros((0, 2))
        a = np.concatenate([b[:-1] for b in self.boundaries])
        b = np.concatenate([b[1:] for b in self.boundaries])
        return a, b

    def bounding_box(self, pad: float = 10.0) -> tuple[float, float, float, float]:
        pts = [lane.polyline for lane in self.lanes.values()] + list(self.boundaries)
        allp = np.concatenate(pts)
        lo, hi = allp.min(axis=0) - pad, allp.max(axis=0) + pad
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def actor(self, actor_id: str) -> Actor:
        for a in self.actors:
            if a.id == actor_id:
                return a
        raise KeyError(actor_id)

    def bodies_at(self, t: float) -> list[BodyState]:
        out = []
        for a in self.actors:
            st = a.state(t)
            if st is not None:
                out.append(st)
        return out

    def route_path(self, route: tuple[str, ...] | None = None, ds: float = 0.5) -> ArcLengthPath:
        """Concatenate the lanes of ``route`` into one arc-length path."""
        route = self.ego.route if route is None else route
        verts, limits = [], []
        for lane_id in route:
            lane = self.lanes[lane_id]
            pts = lane.polyline
            if verts and np.linalg.norm(verts[-1] - pts[0]) < 1e-6:
                pts = pts[1:]
            verts.extend(pts)
            limits.extend([lane.speed_limit] * len(pts))
        return ArcLengthPath.from_polyline(np.array(verts), ds, np.array(limits))

    def route_stoplines(self, route: tuple[str, ...] | None = None) -> list[float]:
        """Stop-line arc lengths measured along the concatenated route."""
        route = self.ego.route if route is None else route
        offset, out = 0.0, []
        for lane_id in route:
            for sl in self.stoplines:
                if sl.lane_id == lane_id:
                    out.append(offset + sl.s)
            offset += self.lanes[lane_id].length
        return sorted(out)


def _get(table: dict[str, Any], key: str, where: str, kind: type | tuple[type, ...] | None = None) -> Any:
    if key not in table:
        raise ScenarioError(f"{where}.{key}", "missing required field")
    value = table[key]
    if kind is not None and not isinstance(value, kind):
        raise ScenarioError(f"{where}.{key}", f"expected {kind}, got {type(value).__name__}")
    return value


def _points(value: Any, where: str, min_len: int = 2) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(where, f"not a numeric point list ({exc})") from None
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < min_len:
        raise ScenarioError(where, f"expected at least {min_len} [x, y] points")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError(where, "non-finite coordinate")
    return arr


def _size(value: Any, where: str) -> tuple[float, float, float]:
    try:
        size = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ScenarioError(where, "expected [l, w, h]") from None
    if len(size) != 3 or min(size) <= 0:
        raise ScenarioError(where, "expected three positive dimensions")
    return size  # type: ignore[return-value]


def parse_scenario(data: dict[str, Any], name: str = "scenario") -> Scenario:
    sim = _get(data, "sim", "", dict)
    duration = float(_get(sim, "duration_s", "sim", (int, float)))
    tick = float(_get(sim, "tick_s", "sim", (int, float)))
    if duration <= 0 or tick <= 0:
        raise ScenarioError("sim", "duration_s and tick_s must be positive")
    seed = int(sim.get("seed", 0))

    mp = _get(data, "map", "", dict)
    lanes: dict[str, Lane] = {}
    for i, ln in enumerate(_get(mp, "lanes", "map", list)):
        where = f"map.lanes[{i}]"
        lid = str(_get(ln, "id", where))
        if lid in lanes:
            raise ScenarioError(f"{where}.id", f"duplicate lane id {lid!r}")
        limit = float(_get(ln, "speed_limit_mps", where, (int, float)))
        if limit <= 0:
            raise ScenarioError(f"{where}.speed_limit_mps", "must be positive")
        lanes[lid] = Lane(lid, _points(_get(ln, "polyline_m", where), f"{where}.polyline_m"), limit)

    stoplines = []
    for i, sl in enumerate(mp.get("stoplines", [])):
        where = f"map.stoplines[{i}]"
        lane_id = str(_get(sl, "lane_id", where))
        if lane_id not in lanes:
            raise ScenarioError(f"{where}.lane_id", f"unknown lane {lane_id!r}")
        s = float(_get(sl, "s_m", where, (int, float)))
        if not 0.0 <= s <= lanes[lane_id].length + 0.5:
            raise ScenarioError(f"{where}.s_m", "stop line does not lie on its lane")
        stoplines.append(StopLine(lane_id, s))

    boundaries = tuple(
        _points(_get(b, "polyline_m", f"map.boundaries[{i}]"), f"map.boundaries[{i}].polyline_m")
        for i, b in enumerate(mp.get("boundaries", []))
    )

    actors = []
    seen: set[str] = set()
    for i, ac in enumerate(data.get("actors", [])):
        where = f"actors[{i}]"
        aid = str(_get(ac, "id", where))
        if aid in seen:
            raise ScenarioError(f"{where}.id", f"duplicate actor id {aid!r}")
        seen.add(aid)
        cls_name = str(ac.get("class", "car")).upper()
        if cls_name not in ObjectClass.__members__:
            raise ScenarioError(f"{where}.class", f"unknown class {cls_name.lower()!r}")
        rows = []
        for j, smp in enumerate(_get(ac, "trajectory", where, list)):
            w = f"{where}.trajectory[{j}]"
            rows.append([float(_get(smp, k, w, (int, float))) for k in ("t_s", "x_m", "y_m", "yaw_rad")])
        traj = np.array(rows, dtype=float).reshape(-1, 4)
        if len(traj) == 0:
            raise ScenarioError(f"{where}.trajectory", "empty trajectory")
        _check_continuity(traj, f"{where}.trajectory")
        actors.append(Actor(aid, ObjectClass[cls_name], _size(_get(ac, "size_lwh_m", where), f"{where}.size_lwh_m"), traj))

    eg = _get(data, "ego", "", dict)
    route = tuple(str(r) for r in _get(eg, "route", "ego", list))
    if not route:
        raise ScenarioError("ego.route", "empty route")
    for r in route:
        if r not in lanes:
            raise ScenarioError("ego.route", f"unknown lane {r!r}")
    ego = EgoSpec(
        id=int(eg.get("id", 1)),
        route=route,
        start_s=float(eg.get("start_s_m", 0.0)),
        start_v=float(eg.get("start_v_mps", 0.0)),
        size=_size(eg.get("size_lwh_m", [4.5, 1.9, 1.6]), "ego.size_lwh_m"),
    )

    senders = []
    for i, sd in enumerate(data.get("senders", [])):
        where = f"senders[{i}]"
        actor_id = str(_get(sd, "actor", where))
        if actor_id not in seen:
            raise ScenarioError(f"{where}.actor", f"unknown actor {actor_id!r}")
        trust = float(sd.get("trust", 1.0))
        if not 0.0 <= trust <= 1.0:
            raise ScenarioError(f"{where}.trust", "must be in [0, 1]")
        sid = int(_get(sd, "id", where, int))
        if sid == ego.id or any(s.id == sid for s in senders):
            raise ScenarioError(f"{where}.id", f"duplicate vehicle id {sid}")
        senders.append(SenderSpec(sid, actor_id, trust))

    overrides = {k: dict(data[k]) for k in ("planner", "sensor", "link", "fusion", "localization") if k in data}
    scenario = Scenario(
        name=str(data.get("name", name)),
        lanes=lanes,
        stoplines=tuple(stoplines),
        boundaries=boundaries,
        actors=tuple(actors),
        ego=ego,
        senders=tuple(senders),
        duration=duration,
        tick=tick,
        seed=seed,
        overrides=overrides,
        description=str(data.get("description", "")),
    )
    path = scenario.route_path()
    if not 0.0 <= ego.start_s < path.length:
        raise ScenarioError("ego.start_s_m", "start lies outside the route")
    return scenario


def _check_continuity(traj: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(traj)):
        raise ScenarioError(where, "non-finite sample")
    if len(traj) < 2:
        return
    dt = np.diff(traj[:, 0])
    if np.any(dt <= 0):
        raise ScenarioError(where, "sample times must strictly increase")
    speed = np.linalg.norm(np.diff(traj[:, 1:3], axis=0), axis=1) / dt
    typical = float(np.median(speed))
    jumps = np.nonzero(speed > 1.5 * typical + 0.5)[0]
    if len(jumps):
        raise ScenarioError(f"{where}[{int(jumps[0]) + 1}]", "discontinuous trajectory (position jump)")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(str(path), f"cannot read file ({exc.strerror})") from None
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"{path.name}", str(exc)) from None
    return parse_scenario(data, name=path.stem)


def straight_actor_trajectory(
    start: tuple[float, float], heading: float, speed: float, t0: float, t1: float, step: float = 0.5
) -> list[list[float]]:
    """Constant-velocity script rows (t, x, y, yaw); handy for scenario authoring."""
    n = int(math.floor((t1 - t0) / step + 1e-9)) + 1
    rows = []
    for k in range(n):
        t = t0 + k * step
        d = speed * (t - t0)
        rows.append([t, start[0] + d * math.cos(heading), start[1] + d * math.sin(heading), heading])
    return rows
