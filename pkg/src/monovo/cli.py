"""Command line: ``monovo {simulate,run,evaluate,drift}``.

Exit codes: 0 success, 1 invalid input (config, arguments, unparsable files),
2 failure while processing valid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, resolve_config
from .driftmeter import compute_drift, read_snapshots, write_snapshots
from .evalmetrics import DegenerateGeometry, NoOverlap, Trajectory
from .io import (DRIFT_FIELDS, STATUS_FIELDS, ParseError, read_csv, read_track_stream, read_tum, write_csv,
                 write_track_stream, write_tum)
from . import runner

log = logging.getLogger("monovo")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> RunConfig:
    cfg = resolve_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    cam, frames = runner.simulate(cfg)
    out = _out(args)
    write_track_stream(out / "tracks.txt", cam, frames)
    write_tum(out / "groundtruth.tum", [f.timestamp for f in frames], [f.true_pose for f in frames])
    log.info("wrote %d frames to %s", len(frames), out)
    return EXIT_OK


def _drift_rows(drift) -> list[dict]:
    return [{"timestamp": t, "lambda_min": r.lambda_min, "mean_rel_translation": r.mean_rel_translation,
             "Lambda": r.Lambda} for t, r in drift]


def cmd_run(args) -> int:
    cfg = _config(args)
    cam, frames = read_track_stream(args.tracks)
    odo = runner.run_odometry(cfg, cam, frames, record_snapshots=args.snapshots)
    out = _out(args)
    write_tum(out / "estimate.tum", [t for t, _ in odo.trajectory], [T for _, T in odo.trajectory])
    write_csv(out / "status.csv", STATUS_FIELDS, (s.row() for s in odo.status))
    write_csv(out / "drift.csv", DRIFT_FIELDS, _drift_rows(odo.drift))
    if args.snapshots:
        write_snapshots(out / "snapshots.jsonl", odo.snapshots)
    n_reset = sum(1 for s in odo.status if s.reset != "none")
    log.info("%d frames, %d keyframes, %d resets", len(odo.status), sum(s.keyframe for s in odo.status), n_reset)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    delta = args.delta if args.delta is not None else cfg.evaluate.delta
    if not delta > 0:
        raise UsageError("--delta must be positive")
    est_stamps, est_poses = read_tum(args.est)
    try:
        gt = Trajectory(*read_tum(args.gt))
        Trajectory(est_stamps, est_poses)
    except ValueError as e:
        if isinstance(e, ParseError):
            raise
        raise UsageError(str(e)) from None
    status = read_csv(args.status)
    if len(status) != len(est_stamps):
        raise UsageError(f"{args.status} has {len(status)} rows but {args.est} has {len(est_stamps)} poses")
    m = runner.metrics(gt, est_stamps, est_poses, status, delta)
    out = _out(args)
    (out / "metrics.json").write_text(json.dumps(m, sort_keys=True, indent=2) + "\n")
    est = runner.evaluated_part(est_stamps, est_poses, status)
    st, s = runner.relative_scale_series(gt, est, delta)
    write_csv(out / "scale.csv", ["timestamp", "s_t"], ({"timestamp": t, "s_t": v} for t, v in zip(st, s)))
    if args.drift:
        rows = read_csv(args.drift)
        series = runner.drift_series(gt, est, [float(r["timestamp"]) for r in rows],
                                     [float(r["Lambda"]) for r in rows], delta,
                                     cfg.evaluate.scale_delta, cfg.evaluate.drift_window)
        write_csv(out / "series.csv", ["timestamp", "altitude", "s_t", "Lambda", "drift_rate"], series.rows())
    print(json.dumps(m, sort_keys=True))
    return EXIT_OK


def cmd_drift(args) -> int:
    snaps = read_snapshots(args.snapshots)
    rows = []
    for window, t in snaps:
        r = compute_drift(window)
        rows.append({"timestamp": t, "lambda_min": r.lambda_min, "mean_rel_translation": r.mean_rel_translation,
                     "Lambda": r.Lambda})
    write_csv(_out(args) / "drift.csv", DRIFT_FIELDS, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="monovo", description="Synthetic monocular odometry experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="TOML file or preset name")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="generate a track stream and ground truth")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run the odometry on a track stream")
    common(sp)
    sp.add_argument("--tracks", required=True)
    sp.add_argument("--snapshots", action="store_true", help="also record window snapshots")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="relative pose error and tracking statistics")
    common(sp)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--est", required=True)
    sp.add_argument("--status", required=True)
    sp.add_argument("--drift", help="drift CSV from 'run'; adds series.csv")
    sp.add_argument("--delta", type=float)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("drift", help="recompute the drift indicator from window snapshots")
    common(sp, config=False)
    sp.add_argument("--snapshots", required=True)
    sp.set_defaults(func=cmd_drift)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"monovo: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError) as e:
        print(f"monovo: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"monovo: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (NoOverlap, DegenerateGeometry) as e:
        print(f"monovo: evaluation failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    except Exception as e:  # anything else is a processing failure, not bad input
        log.debug("unhandled", exc_info=True)
        print(f"monovo: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
