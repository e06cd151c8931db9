"""Surrogate safety metrics over closed-loop logs.

All metrics judge ground truth: the ego's executed states and the
scripted actor boxes, never what any vehicle perceived.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString, Point, Polygon
from shapely.ops import unary_union

from coopsim.core import ValidationError, box_corners

TTC_STEP = 0.05
TTC_HORIZON = 20.0
DECEL_THRESHOLD = 0.5  # m/s^2 of braking that counts as a reaction


@dataclass(frozen=True)
class Box:
    """Planar box with constant-velocity motion (ground truth at one instant)."""

    x: float
    y: float
    yaw: float
    length: float
    width: float
    vx: float = 0.0
    vy: float = 0.0

    def corners(self, tau: float = 0.0) -> np.ndarray:
        return box_corners(self.x + self.vx * tau, self.y + self.vy * tau, self.length, self.width, self.yaw)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def polygon(self) -> Polygon:
        return Polygon(self.corners())


# -- geometry helpers ------------------------------------------------------------


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for convex quads a, b of shape (N, 4, 2); touching counts as overlap."""
    a = np.asarray(a, dtype=float).reshape(-1, 4, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 4, 2)
    a, b = np.broadcast_arrays(a, b)
    overlap = np.ones(len(a), dtype=bool)
    for quad in (a, b):
        edges = np.roll(quad, -1, axis=1) - quad
        axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)[:, :2]  # two distinct normals per box
        pa = np.einsum("nkj,naj->nka", axes, a)
        pb = np.einsum("nkj,naj->nka", axes, b)
        sep = (pa.max(axis=2) < pb.min(axis=2)) | (pb.max(axis=2) < pa.min(axis=2))
        overlap &= ~sep.any(axis=1)
    return overlap


def _seg_point_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(np.einsum("...j,...j->...", p - a, ab) / np.maximum(np.einsum("...j,...j->...", ab, ab), 1e-18), 0, 1)
    d = p - (a + t[..., None] * ab)
    return np.sqrt(np.einsum("...j,...j->...", d, d))


def box_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean gap between two convex quads, 0 when they overlap."""
    if boxes_overlap(a, b)[0]:
        return 0.0
    best = math.inf
    for p, q in ((a, b), (b, a)):
        qa, qb = q, np.roll(q, -1, axis=0)
        d = _seg_point_distance(p[:, None, :], qa[None], qb[None])
        best = min(best, float(d.min()))
    return best


# -- TTC -------------------------------------------------------------------------


def time_to_collision(ego: Box, actor: Box, step: float = TTC_STEP, horizon: float = TTC_HORIZON) -> float:
    """First sweep time at which the extrapolated footprints overlap, or inf."""
    taus = np.arange(int(round(horizon / step)) + 1) * step
    rel_v = actor.velocity - ego.velocity
    base_e = ego.corners()
    base_a = actor.corners()
    moved = base_a[None, :, :] + taus[:, None, None] * rel_v[None, None, :]
    hit = boxes_overlap(base_e[None], moved)
    idx = np.nonzero(hit)[0]
    return float(taus[idx[0]]) if len(idx) else math.inf


def compute_ttc(ego: Box, actors: Sequence[Box]) -> tuple[float, list[float]]:
    """Step TTC (min over actors) and the per-actor values."""
    per = [time_to_collision(ego, a) for a in actors]
    return (min(per) if per else math.inf), per


# -- DRAC ------------------------------------------------------------------------


def drac(v_rel: float, d: float) -> float:
    """Deceleration needed to cancel a closing speed ``v_rel`` within distance ``d``."""
    if v_rel <= 0.0:
        return 0.0
    if d <= 0.0:
        return math.inf
    return v_rel * v_rel / (2.0 * d)


def closing_speed(ego: Box, actor: Box) -> float:
    """Rate at which the center distance shrinks (positive when closing)."""
    dp = actor.xy - ego.xy
    n = float(np.hypot(*dp))
    if n == 0.0:
        return 0.0
    return float(-(dp @ (actor.velocity - ego.velocity)) / n)


def compute_drac(ego: Box, actors: Sequence[Box], ttc: Sequence[float]) -> tuple[float, bool]:
    """Worst required deceleration over actors on a collision course; flags a collision."""
    worst, collision = 0.0, False
    for actor, t in zip(actors, ttc):
        if not math.isfinite(t):
            continue
        d = box_gap(ego.corners(), actor.corners())
        if d <= 0.0:
            collision = True
            worst = math.inf
            continue
        worst = max(worst, drac(closing_speed(ego, actor), d))
    return worst, collision


# -- conflict zones and DCZ --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConflictZone:
    """Overlap of the ego corridor with one actor's corridor."""

    actor_id: str
    polygon: Polygon

    @property
    def empty(self) -> bool:
        return self.polygon.is_empty


def _corridor(path: np.ndarray, half_width: float):
    path = np.asarray(path, dtype=float).reshape(-1, 2)
    uniq = path[np.concatenate([[True], np.linalg.norm(np.diff(path, axis=0), axis=1) > 1e-9])]
    if len(uniq) < 2:
        return Point(uniq[0]).buffer(half_width)
    return LineString(uniq).buffer(half_width)


def conflict_zone(ego_path: np.ndarray, actor_path: np.ndarray, half_width: float, actor_id: str = "") -> ConflictZone:
    """Spatial intersection of two corridors of ``half_width`` around the paths."""
    zone = _corridor(ego_path, half_width).intersection(_corridor(actor_path, half_width))
    if zone.geom_type not in ("Polygon", "MultiPolygon"):
        zone = unary_union([g for g in getattr(zone, "geoms", []) if g.geom_type == "Polygon"]) if not zone.is_empty else Polygon()
    return ConflictZone(actor_id, zone)


def zone_active(zone: ConflictZone, actor_footprints: Iterable[np.ndarray]) -> bool:
    """A zone is active while the actor occupies it or will within the look-ahead footprints."""
    if zone.empty:
        return False
    return any(zone.polygon.intersects(Polygon(c)) for c in actor_footprints)


def compute_dcz(ego: Box, zones: Sequence[ConflictZone]) -> tuple[float, bool]:
    """Distance from the ego footprint to the nearest active zone and whether it is inside one."""
    if not zones:
        return math.inf, False
    poly = ego.polygon()
    dist = min(float(poly.distance(z.polygon)) for z in zones)
    return dist, dist <= 0.0


def compute_vr(violations: Sequence[bool]) -> float:
    """Percentage of planning steps flagged as violating."""
    if len(violations) == 0:
        raise ValidationError("violation rate needs at least one planning step")
    return 100.0 * float(np.count_nonzero(np.asarray(violations, dtype=bool))) / len(violations)


# -- reaction time -----------------------------------------------------------------


def first_deceleration(t: Sequence[float], accel: Sequence[float], threshold: float = DECEL_THRESHOLD) -> float:
    """Time of the first sample braking harder than ``threshold``; nan if never."""
    a = np.asarray(accel, dtype=float)
    idx = np.nonzero(a < -threshold)[0]
    return float(np.asarray(t)[idx[0]]) if len(idx) else math.nan


def reaction_lead(coop_first: float, ego_first: float) -> float:
    """Cooperative first-braking time minus the ego-only one (negative: cooperation reacts earlier)."""
    return coop_first - ego_first


# -- report ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SafetyReport:
    ttc_min: float
    drac: float
    dcz: float
    vr: float
    reaction_lead: float = math.nan
    first_decel: float = math.nan
    collisions: int = 0
    zone_entries: int = 0
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ttc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    drac_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dcz_series: np.ndarray = field(default_factory=lambda: np.zeros(0))
    violations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        if not (self.ttc_min >= 0.0):
            raise ValidationError("ttc_min must be non-negative or +inf")
        if not 0.0 <= self.vr <= 100.0:
            raise ValidationError("vr must lie in [0, 100]")

    def with_lead(self, lead: float) -> SafetyReport:
        return SafetyReport(
            self.ttc_min, self.drac, self.dcz, self.vr, lead, self.first_decel, self.collisions,
            self.zone_entries, self.t, self.ttc, self.drac_series, self.dcz_series, self.violations,
        )


@dataclass(frozen=True)
class StepState:
    """What the metrics need from one planning step."""

    t: float
    ego: Box
    ego_accel: float
    actors: tuple[tuple[str, Box], ...]


def evaluate_run(
    steps: Sequence[StepState],
    ego_path: np.ndarray,
    actor_paths: dict[str, np.ndarray],
    actor_lookahead: dict[str, Sequence[Sequence[np.ndarray]]],
    d_min: float,
) -> SafetyReport:
    """Per-step TTC, DRAC, DCZ and violations, reduced to run values.

    ``actor_lookahead[id][k]`` lists the actor's true footprints from step
    k over the prediction horizon; they decide which zones are active.
    """
    if not steps:
        raise ValidationError("cannot evaluate an empty run")
    zones = {aid: conflict_zone(ego_path, p, d_min, aid) for aid, p in actor_paths.items()}
    n = len(steps)
    ttc = np.full(n, math.inf)
    drc = np.zeros(n)
    dcz = np.full(n, math.inf)
    viol = np.zeros(n, dtype=bool)
    collisions = entries = 0
    for k, st in enumerate(steps):
        boxes = [b for _, b in st.actors]
        ttc[k], per = compute_ttc(st.ego, boxes)
        drc[k], hit = compute_drac(st.ego, boxes, per)
        collisions += int(hit)
        active = [zones[aid] for aid, _ in st.actors if aid in zones and zone_active(zones[aid], actor_lookahead[aid][k])]
        dcz[k], inside = compute_dcz(st.ego, active)
        entries += int(inside)
        ego_c = st.ego.corners()
        close = any(box_gap(ego_c, b.corners()) < d_min for b in boxes)
        viol[k] = inside or close
    t = np.array([s.t for s in steps])
    return SafetyReport(
        ttc_min=float(ttc.min()),
        drac=float(drc.max()),
        dcz=float(dcz.min()),
        vr=compute_vr(viol),
        first_decel=first_deceleration(t, [s.ego_accel for s in steps]),
        collisions=collisions,
        zone_entries=entries,
        t=t,
        ttc=ttc,
        drac_series=drc,
        dcz_series=dcz,
        violations=viol,
    )


# -- output ------------------------------------------------------------------------

CSV_COLUMNS = ("scenario", "mode", "ttc_min_s", "drac_mps2", "dcz_m", "vr_pct", "reaction_lead_s")


def fmt(v: float) -> str:
    """Stable text for CSV cells: fixed precision, explicit inf/nan."""
    if isinstance(v, str):
        return v
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.4f}"


def report_row(scenario: str, mode: str, r: SafetyReport) -> dict[str, str]:
    return {
        "scenario": scenario,
        "mode": mode,
        "ttc_min_s": fmt(r.ttc_min),
        "drac_mps2": fmt(r.drac),
        "dcz_m": fmt(r.dcz),
        "vr_pct": fmt(r.vr),
        "reaction_lead_s": fmt(r.reaction_lead),
    }


def write_csv(rows: Sequence[dict[str, str]], header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def format_table(rows: Sequence[dict[str, str]]) -> str:
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) if rows else len(c) for c in CSV_COLUMNS}
    line = "  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)
    out = [line, "-" * len(line)]
    for r in rows:
        out.append("  ".join(r[c].ljust(widths[c]) for c in CSV_COLUMNS))
    return "\n".join(out)
