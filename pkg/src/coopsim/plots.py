"""SVG figures for one closed-loop run: BEV snapshots and time series."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from coopsim.core import box_corners  # noqa: E402

SNAPSHOTS = 4
# fixed hash salt and no date keep the SVG bytes reproducible
_SVG_RC = {"svg.hashsalt": "coopsim", "svg.fonttype": "none"}
_SVG_META = {"Date": None}


def speed_series(records: Sequence[dict[str, Any]]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Times, ego speed, envelope at the ego and the planner's feasibility flag per tick."""
    t = np.array([r["t_us"] * 1e-6 for r in records], dtype=float)
    v = np.array([r["ego"]["v"] for r in records], dtype=float)
    env = np.array([r["plan"]["envelope_at_ego"] for r in records], dtype=float)
    feas = np.array([bool(r["plan"]["feasible"]) for r in records], dtype=bool)
    return t, v, env, feas


def bandwidth_series(records: Sequence[dict[str, Any]], tick_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-tick wire throughput in bit/s; integrating over the tick gives total bytes times 8."""
    t = np.array([r["t_us"] * 1e-6 for r in records], dtype=float)
    sent = np.array([sum(m["bytes"] for m in r["messages"]["sent"]) for r in records], dtype=float)
    return t, sent * 8.0 / tick_s


def timing_series(timings: Sequence[dict[str, float]]) -> dict[str, np.ndarray]:
    keys = [k for k in (timings[0] if timings else {}) if k != "total_ms"]
    return {k: np.array([tm[k] for tm in timings], dtype=float) for k in keys}


def _save(fig: plt.Figure, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _draw_box(ax: plt.Axes, xy: Sequence[float], yaw: float, size: Sequence[float], **kw: Any) -> None:
    c = box_corners(xy[0], xy[1], size[0], size[1], yaw)
    ax.fill(c[:, 0], c[:, 1], **kw)


def _bev(record: dict[str, Any] | None, boundaries: Sequence[np.ndarray], title: str) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6, 6))
    for b in boundaries:
        ax.plot(b[:, 0], b[:, 1], color="0.3", lw=1.0)
    if record is not None:
        for a in record["actors"]:
            _draw_box(ax, a["pose"][:2], a["pose"][2], a["lw"], color="tab:orange", alpha=0.8)
        for veh in record["vehicles"]:
            for d in veh["detections"]:
                _draw_box(ax, d["xy"], d["yaw"], d["lw"], fill=False, ec="tab:green", lw=1.0)
        for f in record["fused"]:
            _draw_box(ax, f["xy"], f["yaw"], f["lw"], fill=False, ec="tab:purple", ls="--", lw=1.0)
        ego = record["ego"]
        _draw_box(ax, ego["pose"][:2], ego["pose"][2], (4.5, 1.9), color="tab:blue", alpha=0.8)
        traj = record["plan"]["trajectory"]
        ax.plot(traj["x"], traj["y"], color="tab:blue", lw=1.0)
        ax.set_xlim(ego["pose"][0] - 40, ego["pose"][0] + 40)
        ax.set_ylim(ego["pose"][1] - 40, ego["pose"][1] + 40)
    ax.set_aspect("equal")
    ax.set_xlabel("east [m]")
    ax.set_ylabel("north [m]")
    ax.set_title(title)
    return fig


def emit_plots(log: Any, out_dir: str | Path) -> list[Path]:
    """Write BEV snapshots plus speed, bandwidth and timing plots as SVG files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(log.records)
    tick_s = float(log.header.get("tick_s", 0.1))
    label = f"{log.header.get('scenario', '')} / {log.header.get('mode', '')} / seed {log.header.get('seed', '')}"
    paths: list[Path] = []
    with plt.rc_context(_SVG_RC):
        picks = sorted(set(np.linspace(0, len(records) - 1, SNAPSHOTS).round().astype(int))) if records else [None]
        for i, k in enumerate(picks):
            rec = None if k is None else records[k]
            title = label if rec is None else f"{label}  t = {rec['t_us'] * 1e-6:.1f} s"
            paths.append(_save(_bev(rec, log.boundaries, title), out / f"bev_{i:02d}.svg"))

        fig, ax = plt.subplots(figsize=(7, 3.5))
        t, v, env, feas = speed_series(records)
        ax.plot(t, env, label="envelope at ego", color="tab:red")
        ax.plot(t, v, label="ego speed", color="tab:blue")
        if np.any(~feas):
            ax.plot(t[~feas], v[~feas], "x", color="k", label="speed QP infeasible")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("speed [m/s]")
        ax.set_title(f"speed vs envelope: {label}")
        if records:
            ax.legend(loc="best")
        paths.append(_save(fig, out / "speed.svg"))

        fig, ax = plt.subplots(figsize=(7, 3.5))
        t, bps = bandwidth_series(records, tick_s)
        ax.step(t, bps / 1e3, where="post", color="tab:green")
        ax.set_xlabel("t [s]")
        ax.set_ylabel("throughput [kbit/s]")
        ax.set_title(f"V2V bandwidth: {label}")
        paths.append(_save(fig, out / "bandwidth.svg"))

        fig, ax = plt.subplots(figsize=(7, 3.5))
        series = timing_series(log.timings)
        ticks = np.arange(len(log.timings))
        bottom = np.zeros(len(ticks))
        for name, ms in series.items():
            ax.bar(ticks, ms, bottom=bottom, width=1.0, label=name.removesuffix("_ms"))
            bottom += ms
        ax.set_xlabel("tick")
        ax.set_ylabel("wall clock [ms]")
        ax.set_title(f"stage timings: {label}")
        if series:
            ax.legend(loc="best")
        paths.append(_save(fig, out / "timings.svg"))
    return paths
