"""Command line: ``coopsim run | suite | decode-msg | validate``.

Exit codes: 0 success, 1 run failure, 2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from coopsim.comms import DecodeError, LinkModel, decode_message
from coopsim.core import ValidationError
from coopsim.plots import emit_plots
from coopsim.runner import MODES, RunConfig, run_closed_loop, run_suite, write_run
from coopsim.world.scenario import load_scenario

EXIT_OK, EXIT_RUN, EXIT_INVALID = 0, 1, 2


def _seed_list(values: Sequence[str]) -> list[int]:
    seeds = []
    for v in values:
        seeds += [int(x) for x in v.split(",") if x.strip()]
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coopsim", description="Closed-loop cooperative perception and planning simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one closed-loop run")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--mode", choices=MODES, default="coop")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--alpha", type=int, choices=(1, 2, 3, 4), default=1)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--method", choices=("ndt", "icp"), default="ndt")
    run.add_argument("--latency-ms", type=float, default=None, help="override the link latency")
    run.add_argument("--jitter-ms", type=float, default=0.0)
    run.add_argument("--loss", type=float, default=0.0, help="packet loss probability")
    run.add_argument("--no-plots", action="store_true")
    run.add_argument("--dump-messages", action="store_true", help="write every encoded message under messages/")

    suite = sub.add_parser("suite", help="every scenario x mode x seed, with an aggregated report")
    suite.add_argument("--scenarios", required=True, type=Path, help="directory of .toml files, or one file")
    suite.add_argument("--seeds", nargs="+", default=["0,1,2"], help="e.g. 0,1,2 or 0 1 2")
    suite.add_argument("--out", required=True, type=Path)
    suite.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    suite.add_argument("--alpha", type=int, choices=(1, 2, 3, 4), default=1)

    dec = sub.add_parser("decode-msg", help="print the decoded fields of one encoded message")
    dec.add_argument("file", type=Path)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("scenario", type=Path)
    return p


def _cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    link = None
    if args.latency_ms is not None or args.jitter_ms or args.loss:
        base = LinkModel()
        link = LinkModel(
            base.base_latency if args.latency_ms is None else args.latency_ms, args.jitter_ms, args.loss, args.seed
        )
    cfg = RunConfig(scenario, args.mode, args.seed, args.alpha, link=link, method=args.method)
    try:
        log = run_closed_loop(cfg)
    except ValidationError:
        raise
    except Exception as exc:  # any other failure inside the loop is a run failure
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    write_run(log, args.out, messages=args.dump_messages)
    if not args.no_plots:
        emit_plots(log, args.out / "plots")
    rep = log.report()
    print(f"{scenario.name} {args.mode} seed={args.seed}: TTC_min={rep.ttc_min:.3f} s DRAC={rep.drac:.3f} m/s^2 DCZ={rep.dcz:.3f} m VR={rep.vr:.2f} %")
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_suite(args: argparse.Namespace) -> int:
    src: Path = args.scenarios
    paths = sorted(src.glob("*.toml")) if src.is_dir() else [src]
    if not paths:
        print(f"no scenario files in {src}", file=sys.stderr)
        return EXIT_INVALID
    scenarios = [load_scenario(p) for p in paths]
    result = run_suite(scenarios, args.modes, _seed_list(args.seeds), out_dir=args.out, alpha=args.alpha)
    print(result.table())
    for name, mode, seed, why in result.failures:
        print(f"FAILED {name} {mode} seed{seed}: {why}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUN


def _cmd_decode(args: argparse.Namespace) -> int:
    msg = decode_message(args.file.read_bytes())
    out = {
        "sender_id": msg.sender_id,
        "sequence": msg.sequence,
        "send_timestamp_us": msg.send_timestamp,
        "sender_pose": {"x": msg.sender_pose.x, "y": msg.sender_pose.y, "theta": msg.sender_pose.theta},
        "pose_quality": msg.pose_quality,
        "detections": [
            {
                "class": d.class_id.name.lower(),
                "center": list(d.center),
                "size": list(d.size),
                "yaw": d.yaw,
                "velocity": list(d.velocity),
                "confidence": d.confidence,
                "timestamp_us": d.timestamp,
                "source_id": d.source_id,
                "track_id": d.track_id,
            }
            for d in msg.detections
        ],
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    scn = load_scenario(args.scenario)
    print(f"{args.scenario}: ok ({scn.name}, {len(scn.lanes)} lanes, {len(scn.actors)} actors, {len(scn.senders)} senders)")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "suite": _cmd_suite, "decode-msg": _cmd_decode, "validate": _cmd_validate}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, DecodeError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if args.command in ("validate", "decode-msg") else EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
