"""Closed-loop orchestration: perception, localization, V2V exchange, fusion and planning per tick."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from coopsim.comms import (
    BandwidthMeter,
    DecodeError,
    FusionPolicy,
    FusionResult,
    FusedObject,
    Inbox,
    LinkModel,
    V2VMessage,
    decode_message,
    encode_message,
    fuse_detections,
    link_deliver,
)
from coopsim.core import ObjectState, Pose2D, ValidationError, seconds_to_us, transform_to_world, wrap_angle
from coopsim.localization import (
    GeometryMap,
    RefineResult,
    accumulate_map,
    coarse_to_fine_refine,
    extract_keypoints,
    inject_gnss_noise,
)
from coopsim.metrics import Box, SafetyReport, StepState, evaluate_run, fmt, format_table, report_row, write_csv
from coopsim.planning import EgoState, PlannerConfig, plan_step
from coopsim.world.scenario import BodyState, Scenario, load_scenario
from coopsim.world.sensor import SensorConfig, build_dynamic_mask, detect_objects, nms_distance, raycast_scan

MODES = ("ego_only", "coop")
EGO_BODY = "ego"
SURVEY_SPACING = 4.0
KEYPOINT_CAP = 256


@dataclass(frozen=True)
class RunConfig:
    scenario: str | Path | Scenario
    mode: str = "coop"
    seed: int = 0
    alpha: int = 1
    link: LinkModel | None = None  # None: scenario [link] table or defaults
    out_dir: str | Path | None = None
    method: str = "ndt"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha not in (1, 2, 3, 4):
            raise ValidationError(f"alpha must be in 1..4, got {self.alpha}")
        if self.method not in ("ndt", "icp"):
            raise ValidationError(f"unknown localization method {self.method!r}")


@dataclass
class MessageCounts:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    in_flight: int = 0
    bytes_sent: int = 0


@dataclass
class RunLog:
    header: dict[str, Any]
    records: list[dict[str, Any]] = field(default_factory=list)
    timings: list[dict[str, float]] = field(default_factory=list)  # wall clock; excluded from log.jsonl
    steps: list[StepState] = field(default_factory=list)
    counts: MessageCounts = field(default_factory=MessageCounts)
    bandwidth: BandwidthMeter = field(default_factory=BandwidthMeter)
    ego_path: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    actor_paths: dict[str, np.ndarray] = field(default_factory=dict)
    actor_lookahead: dict[str, list[list[np.ndarray]]] = field(default_factory=dict)
    d_min: float = 1.5
    boundaries: tuple[np.ndarray, ...] = ()  # map walls, for plotting
    wire: list[tuple[int, int, bytes]] = field(default_factory=list)  # (sender, seq, encoded bytes)

    def report(self) -> SafetyReport:
        return evaluate_run(self.steps, self.ego_path, self.actor_paths, self.actor_lookahead, self.d_min)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps({"type": "tick", **r}, sort_keys=True) for r in self.records]
        summary = {
            "type": "summary",
            "messages_sent": self.counts.sent,
            "messages_delivered": self.counts.delivered,
            "messages_dropped": self.counts.dropped,
            "messages_in_flight": self.counts.in_flight,
            "bytes_sent": self.counts.bytes_sent,
        }
        lines.append(json.dumps(summary, sort_keys=True))
        return "\n".join(lines) + "\n"


# -- configuration from scenario overrides -------------------------------------------


def _dataclass_from_table(cls, table: dict[str, Any], where: str, keys: dict[str, str]):
    unknown = set(table) - set(keys)
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        name = keys[key]
        kwargs[name] = int(value) if types[name] in ("int", int) else float(value)
    return cls(**kwargs)


SENSOR_KEYS = {
    "n_rays": "n_rays",
    "max_range_m": "max_range",
    "min_hits": "min_hits",
    "sigma_det_m": "sigma_det",
    "sigma_range_m": "sigma_range",
    "nms_radius_m": "nms_radius",
    "mask_dilation_m": "mask_dilation",
}
LINK_KEYS = {"base_latency_ms": "base_latency", "jitter_ms": "jitter", "loss_rate": "loss_rate"}
FUSION_KEYS = {
    "tau_ms": "tau_ms",
    "confidence_floor": "confidence_floor",
    "dedup_m": "dedup_m",
    "stale_ms": "stale_ms",
}


@dataclass(frozen=True)
class Settings:
    planner: PlannerConfig
    sensor: SensorConfig
    link: LinkModel
    fusion: FusionPolicy


def settings_for(scenario: Scenario, cfg: RunConfig) -> Settings:
    ov = scenario.overrides
    planner = PlannerConfig.from_table(ov.get("planner", {}))
    if abs(planner.dt - scenario.tick) > 1e-12:
        planner = replace(planner, dt=scenario.tick)
    sensor = _dataclass_from_table(SensorConfig, ov.get("sensor", {}), "sensor", SENSOR_KEYS)
    if cfg.link is not None:
        link = cfg.link
    else:
        link = _dataclass_from_table(LinkModel, ov.get("link", {}), "link", LINK_KEYS)
    link = replace(link, seed=int(cfg.seed))
    fusion = _dataclass_from_table(FusionPolicy, ov.get("fusion", {}), "fusion", FUSION_KEYS)
    fusion = replace(fusion, trust={s.id: s.trust for s in scenario.senders})
    return Settings(planner, sensor, link, fusion)


# -- static map ------------------------------------------------------------------------

_MAP_CACHE: dict[str, GeometryMap] = {}


def _scenario_key(scenario: Scenario) -> str:
    h = hashlib.sha256()
    for lane_id in sorted(scenario.lanes):
        h.update(lane_id.encode())
        h.update(scenario.lanes[lane_id].polyline.tobytes())
    for b in scenario.boundaries:
        h.update(b.tobytes())
    return h.hexdigest()


def survey_map(scenario: Scenario, sensor: SensorConfig) -> GeometryMap:
    """Static keypoint map from scans at known poses every few meters along every lane."""
    key = _scenario_key(scenario) + f"/{sensor.n_rays}/{sensor.max_range}"
    if key in _MAP_CACHE:
        return _MAP_CACHE[key]
    gmap = GeometryMap()
    for lane_id in sorted(scenario.lanes):
        path = scenario.route_path((lane_id,))
        for s in np.arange(0.0, path.length + 1e-9, SURVEY_SPACING):
            p = path.position(s)
            pose = Pose2D(float(p[0]), float(p[1]), float(path.heading(s)))
            scan = raycast_scan(scenario, pose, 0.0, sensor.n_rays, sensor.max_range)
            accumulate_map(gmap, extract_keypoints(scan, (), 0.25), pose)
    _MAP_CACHE[key] = gmap
    return gmap


# -- per-vehicle perception --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Perception:
    vehicle_id: int
    true_pose: Pose2D
    refined: RefineResult
    detections: tuple[ObjectState, ...]  # world frame

    @property
    def pose_quality(self) -> float:
        if self.refined.failed:
            return 0.0
        return 0.5 if self.refined.degraded else 1.0


def perceive(
    scenario: Scenario,
    gmap: GeometryMap,
    settings: Settings,
    vehicle_id: int,
    pose: Pose2D,
    t: float,
    tick: int,
    seed: int,
    alpha: int,
    method: str,
    extra_bodies: Sequence[BodyState],
    exclude: Sequence[str],
) -> Perception:
    """Scan, detect, mask movers, extract keypoints, localize and move detections to the world frame."""
    sc = settings.sensor
    scan = raycast_scan(
        scenario, pose, t, sc.n_rays, sc.max_range, extra_bodies=extra_bodies, exclude=exclude,
        sigma_range=sc.sigma_range, rng=np.random.default_rng([seed, vehicle_id, tick, 1]),
    )
    dets = detect_objects(
        scan, min_hits=sc.min_hits, sigma_det=sc.sigma_det,
        rng=np.random.default_rng([seed, vehicle_id, tick, 2]), source_id=vehicle_id,
    )
    dets = nms_distance(dets, sc.nms_radius)
    kp = extract_keypoints(scan, build_dynamic_mask(dets, sc.mask_dilation), cap=KEYPOINT_CAP)
    prior = inject_gnss_noise(pose, alpha, rng_seed=[seed, vehicle_id, tick, 3])
    refined = coarse_to_fine_refine(kp, gmap, prior, method)
    world = tuple(transform_to_world(d, refined.pose) for d in dets)
    return Perception(vehicle_id, pose, refined, world)


# -- logging helpers -----------------------------------------------------------------------


def _r(v: float, nd: int = 6) -> float | str:
    v = float(v)
    if not math.isfinite(v):
        return fmt(v)
    return round(v, nd)


def _pose(p: Pose2D) -> list[float | str]:
    return [_r(p.x), _r(p.y), _r(p.theta)]


def _obj(o: ObjectState) -> dict[str, Any]:
    return {
        "xy": [_r(o.center[0]), _r(o.center[1])],
        "yaw": _r(o.yaw),
        "v": [_r(o.velocity[0]), _r(o.velocity[1])],
        "lw": [_r(o.size[0]), _r(o.size[1])],
        "class": int(o.class_id),
        "conf": _r(o.confidence),
        "src": int(o.source_id),
    }


def _series(a: np.ndarray, nd: int = 4) -> list[float | str]:
    return [_r(v, nd) for v in np.asarray(a, dtype=float)]


# -- closed loop -----------------------------------------------------------------------------


def _ego_body(route, s: float, offset: float, yaw: float, v: float, size) -> BodyState:
    p = route.position(s, offset)
    return BodyState(EGO_BODY, 0, size, float(p[0]), float(p[1]), float(yaw), v * math.cos(yaw), v * math.sin(yaw))


def run_closed_loop(cfg: RunConfig) -> RunLog:
    scenario = cfg.scenario if isinstance(cfg.scenario, Scenario) else load_scenario(cfg.scenario)
    settings = settings_for(scenario, cfg)
    pc = settings.planner
    route = scenario.route_path()
    stoplines = scenario.route_stoplines()
    gmap = survey_map(scenario, settings.sensor)
    coop = cfg.mode == "coop"
    ego_id = scenario.ego.id
    size = scenario.ego.size

    header = {
        "scenario": scenario.name,
        "mode": cfg.mode,
        "seed": int(cfg.seed),
        "alpha": int(cfg.alpha),
        "method": cfg.method,
        "tick_s": scenario.tick,
        "duration_s": scenario.duration,
        "link": {"base_latency_ms": settings.link.base_latency, "jitter_ms": settings.link.jitter, "loss_rate": settings.link.loss_rate},
        "planner": pc.to_table(),
    }
    log = RunLog(header, d_min=pc.d_min, boundaries=tuple(scenario.boundaries))
    s_start = scenario.ego.start_s
    idx = route.s >= s_start
    log.ego_path = route.points[idx]
    for a in scenario.actors:
        log.actor_paths[a.id] = a.trajectory[:, 1:3]
        log.actor_lookahead[a.id] = []

    s, y_off, dy = s_start, 0.0, 0.0
    v, acc = scenario.ego.start_v, 0.0
    yaw = float(route.heading(s))
    inbox = Inbox()
    in_flight: list[int] = []
    prev_speeds = None
    sequence = {sd.id: 0 for sd in scenario.senders}
    n = scenario.n_ticks
    for k in range(n):
        t = k * scenario.tick
        t_us = seconds_to_us(t)
        timing = {"perception_localization_ms": 0.0, "comms_fusion_ms": 0.0, "planning_ms": 0.0}
        ego_body = _ego_body(route, s, y_off, yaw, v, size)
        bodies = scenario.bodies_at(t)
        ego_pose = Pose2D(ego_body.x, ego_body.y, yaw)

        # perception and localization
        t0 = time.perf_counter()
        ego_p = perceive(scenario, gmap, settings, ego_id, ego_pose, t, k, cfg.seed, cfg.alpha, cfg.method, (), ())
        sender_p: list[Perception] = []
        if coop:
            for sd in scenario.senders:
                st = scenario.actor(sd.actor).state(t)
                if st is None:
                    continue
                pose = Pose2D(st.x, st.y, st.yaw)
                sender_p.append(perceive(scenario, gmap, settings, sd.id, pose, t, k, cfg.seed, cfg.alpha, cfg.method, (ego_body,), (sd.actor,)))
        timing["perception_localization_ms"] = 1e3 * (time.perf_counter() - t0)

        # V2V exchange and fusion
        t0 = time.perf_counter()
        sent_rec, recv_rec = [], []
        if coop:
            ready = inbox.collect(t_us)
            delivered_now = sum(1 for d in in_flight if d <= t_us)
            log.counts.delivered += delivered_now
            in_flight = [d for d in in_flight if d > t_us]
            received = [(m, dt) for m, dt in ready]
            recv_rec = [{"sender": m.sender_id, "seq": m.sequence, "n_det": len(m.detections)} for m, _ in received]
            for per in sender_p:
                msg = V2VMessage(per.vehicle_id, sequence[per.vehicle_id], t_us, per.refined.pose, per.pose_quality, per.detections)
                sequence[per.vehicle_id] += 1
                data = encode_message(msg)
                log.counts.sent += 1
                log.counts.bytes_sent += len(data)
                log.bandwidth.add(t_us, len(data))
                log.wire.append((msg.sender_id, msg.sequence, data))
                deliver = link_deliver(settings.link, msg, t_us)
                sent_rec.append({"sender": msg.sender_id, "seq": msg.sequence, "bytes": len(data), "deliver_us": deliver})
                if deliver is None:
                    log.counts.dropped += 1
                    continue
                try:
                    inbox.push(decode_message(data), deliver)
                except DecodeError as exc:  # pragma: no cover - encode/decode are inverse
                    raise RuntimeError(f"own message failed to decode: {exc}") from exc
                in_flight.append(deliver)
            fused = fuse_detections(ego_p.detections, received, settings.fusion, t_us, receiver_xy=(ego_p.refined.pose.x, ego_p.refined.pose.y))
        else:
            fused = FusionResult(tuple(FusedObject(o, 1.0, False) for o in ego_p.detections))
        timing["comms_fusion_ms"] = 1e3 * (time.perf_counter() - t0)

        # planning
        t0 = time.perf_counter()
        plan = plan_step(EgoState(s, y_off, dy, v, acc), route, fused.pairs(), pc, stoplines=stoplines, previous_speeds=prev_speeds)
        timing["planning_ms"] = 1e3 * (time.perf_counter() - t0)
        timing["total_ms"] = sum(timing.values())
        log.timings.append(timing)
        traj = plan.trajectory

        # metrics view of ground truth at this tick
        actor_boxes = tuple((b.id, Box(b.x, b.y, b.yaw, b.size[0], b.size[1], b.vx, b.vy)) for b in bodies)
        ego_box = Box(ego_body.x, ego_body.y, yaw, size[0], size[1], ego_body.vx, ego_body.vy)
        log.steps.append(StepState(t, ego_box, acc, actor_boxes))
        for a in scenario.actors:
            look = []
            for tau in np.arange(0.0, pc.t_pred + 1e-9, 0.2):
                st = a.state(min(t + tau, scenario.duration)) if t + tau <= a.trajectory[-1, 0] + 1e-9 else None
                if st is not None:
                    look.append(st.corners())
            log.actor_lookahead[a.id].append(look)

        log.records.append({
            "tick": k,
            "t_us": t_us,
            "ego": {"pose": _pose(ego_pose), "s": _r(s), "offset": _r(y_off), "v": _r(v), "a": _r(acc)},
            "actors": [{"id": b.id, "pose": [_r(b.x), _r(b.y), _r(b.yaw)], "v": [_r(b.vx), _r(b.vy)], "lw": [b.size[0], b.size[1]]} for b in bodies],
            "vehicles": [
                {
                    "id": p.vehicle_id,
                    "true_pose": _pose(p.true_pose),
                    "refined_pose": _pose(p.refined.pose),
                    "loc_failed": p.refined.failed,
                    "loc_degraded": p.refined.degraded,
                    "detections": [_obj(o) for o in p.detections],
                }
                for p in [ego_p, *sender_p]
            ],
            "messages": {"sent": sent_rec, "received": recv_rec},
            "fused": [{**_obj(f.obj), "weight": _r(f.weight), "remote": f.remote} for f in fused.objects],
            "plan": {
                "chosen": plan.chosen,
                "shift": plan.candidates[plan.chosen].shift,
                "costs": _series(plan.costs),
                "feasible": plan.feasible,
                "degraded": plan.degraded,
                "k_stop": plan.k_stop,
                "envelope_zero_s": _r(plan.envelope.zero_s) if plan.envelope.zero_s is not None else None,
                "envelope_at_ego": _r(plan.envelope.v_max[0]),
                "envelope": {"ds": pc.envelope_ds, "v_max": _series(plan.envelope.v_max, 3), "term": "".join(t_[0] for t_ in plan.envelope.term)},
                "v_max_time": _series(plan.v_max_time),
                "trajectory": {"v": _series(traj.v), "a": _series(traj.a), "x": _series(traj.x, 3), "y": _series(traj.y, 3)},
            },
        })

        # execute one tick of the plan
        prev_speeds = traj.v
        s = float(traj.s[1])
        y_off = float(traj.offset[1])
        dy = float(np.tan(wrap_angle(float(traj.yaw[1]) - float(route.heading(s)))))
        v = float(max(traj.v[1], 0.0))
        acc = float(traj.a[1])
        yaw = float(traj.yaw[1])
        if s >= route.length - 1e-6:
            break

    log.counts.in_flight = len(in_flight)
    if cfg.out_dir is not None:
        write_run(log, Path(cfg.out_dir))
    return log


def write_run(log: RunLog, out: Path, messages: bool = False) -> None:
    """log.jsonl, timings.jsonl and report.csv; with ``messages`` also every encoded message under messages/."""
    out.mkdir(parents=True, exist_ok=True)
    if messages:
        (out / "messages").mkdir(exist_ok=True)
        for sender, seq, data in log.wire:
            (out / "messages" / f"sender{sender}_seq{seq:05d}.bin").write_bytes(data)
    (out / "log.jsonl").write_text(log.to_jsonl(), encoding="utf-8")
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for i, tm in enumerate(log.timings):
            fh.write(json.dumps({"tick": i, **{k: round(v, 3) for k, v in tm.items()}}) + "\n")
    rep = log.report()
    row = report_row(log.header["scenario"], log.header["mode"], rep)
    (out / "report.csv").write_text(write_csv([row], _artifact_comment(log.header)), encoding="utf-8")


def _artifact_comment(header: dict[str, Any]) -> str:
    return f"scenario={header['scenario']} mode={header['mode']} seed={header['seed']} alpha={header['alpha']}"


# -- suite ------------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SuiteResult:
    rows: tuple[dict[str, str], ...]
    reports: dict[tuple[str, str, int], SafetyReport]
    means: dict[tuple[str, str], dict[str, float]]
    improvement: dict[str, float]
    failures: tuple[tuple[str, str, int, str], ...]
    tick_ms: tuple[float, ...]

    @property
    def ok(self) -> bool:
        return not self.failures

    def csv(self) -> str:
        return write_csv(self.rows)

    def table(self) -> str:
        return format_table(self.rows)


METRIC_KEYS = ("ttc_min", "drac", "dcz", "vr", "reaction_lead")


def _mean(vals: Sequence[float]) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        return math.nan
    if any(math.isinf(v) for v in vals):
        pos = any(v == math.inf for v in vals)
        neg = any(v == -math.inf for v in vals)
        return math.nan if pos and neg else (math.inf if pos else -math.inf)
    return float(np.mean(vals))


def run_suite(
    scenarios: Sequence[str | Path | Scenario],
    modes: Sequence[str] = MODES,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir: str | Path | None = None,
    alpha: int = 1,
) -> SuiteResult:
    """Every (scenario, mode, seed) run, per-scenario means over seeds, and the coop minus ego-only row."""
    if not scenarios:
        raise ValidationError("suite needs at least one scenario")
    loaded = [s if isinstance(s, Scenario) else load_scenario(s) for s in scenarios]
    reports: dict[tuple[str, str, int], SafetyReport] = {}
    failures: list[tuple[str, str, int, str]] = []
    tick_ms: list[float] = []
    for scn in loaded:
        for seed in seeds:
            for mode in modes:
                out = None if out_dir is None else Path(out_dir) / scn.name / mode / f"seed{seed}"
                try:
                    log = run_closed_loop(RunConfig(scn, mode, seed, alpha, out_dir=None))
                    rep = log.report()
                except Exception as exc:  # a failed run is recorded and skipped
                    failures.append((scn.name, mode, seed, f"{type(exc).__name__}: {exc}"))
                    continue
                tick_ms.extend(tm["total_ms"] for tm in log.timings)
                reports[(scn.name, mode, seed)] = rep
                if out is not None:
                    write_run(log, out)
            if "coop" in modes and "ego_only" in modes:
                c, e = reports.get((scn.name, "coop", seed)), reports.get((scn.name, "ego_only", seed))
                if c is not None and e is not None:
                    lead = c.first_decel - e.first_decel
                    reports[(scn.name, "coop", seed)] = c.with_lead(lead)
                    reports[(scn.name, "ego_only", seed)] = e.with_lead(lead)

    means: dict[tuple[str, str], dict[str, float]] = {}
    rows: list[dict[str, str]] = []
    for scn in loaded:
        for mode in modes:
            reps = [reports[(scn.name, mode, sd)] for sd in seeds if (scn.name, mode, sd) in reports]
            if not reps:
                continue
            m = {k: _mean([getattr(r, k) for r in reps]) for k in METRIC_KEYS}
            means[(scn.name, mode)] = m
            rows.append({
                "scenario": scn.name, "mode": mode, "ttc_min_s": fmt(m["ttc_min"]), "drac_mps2": fmt(m["drac"]),
                "dcz_m": fmt(m["dcz"]), "vr_pct": fmt(m["vr"]), "reaction_lead_s": fmt(m["reaction_lead"]),
            })
    improvement: dict[str, float] = {}
    if "coop" in modes and "ego_only" in modes:
        for k in METRIC_KEYS[:-1]:
            cs = [means[(s.name, "coop")][k] for s in loaded if (s.name, "coop") in means]
            es = [means[(s.name, "ego_only")][k] for s in loaded if (s.name, "ego_only") in means]
            c, e = _mean(cs), _mean(es)
            improvement[k] = c - e if not (math.isinf(c) and c == e) else math.nan
        # the lead is already a paired difference; the summary row carries its mean
        improvement["reaction_lead"] = _mean([means[(s.name, "coop")]["reaction_lead"] for s in loaded if (s.name, "coop") in means])
        rows.append({
            "scenario": "all", "mode": "Improvement", "ttc_min_s": fmt(improvement["ttc_min"]),
            "drac_mps2": fmt(improvement["drac"]), "dcz_m": fmt(improvement["dcz"]), "vr_pct": fmt(improvement["vr"]),
            "reaction_lead_s": fmt(improvement["reaction_lead"]),
        })
    result = SuiteResult(tuple(rows), reports, means, improvement, tuple(failures), tuple(tick_ms))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        comment = f"seeds={','.join(str(s) for s in seeds)} modes={','.join(modes)} alpha={alpha}"
        (out / "report.csv").write_text(write_csv(list(rows), comment), encoding="utf-8")
        if failures:
            (out / "failures.txt").write_text("".join(f"{a} {b} seed{c}: {d}\n" for a, b, c, d in failures), encoding="utf-8")
    return result
