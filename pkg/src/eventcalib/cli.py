"""Command-line entry point: ``eventcalib {calibrate,detect,simulate,report}``.

Exit codes
    0  success
    2  bad arguments or configuration
    3  I/O error: unreadable or malformed input, unwritable output
    4  calibration infeasible: too few successful detections
    5  internal divergence of the solver
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .calibration import CalibrationDiverged, CalibrationInfeasible
from .camera import Distortion, Intrinsics, ViewPose
from .config import ConfigError, PipelineConfig, load_config, reference_text
from .events import EventFormatError, SensorGeometry
from .pattern import PatternSpec
from .pipeline import run_calibration, run_detection_only
from .report import (
    ReportSchemaError,
    build_report,
    dumps,
    load_report,
    pose_errors,
    render_pose_summary,
    render_text,
    write_pose_csv,
    write_residuals_csv,
)
from .simulator import GroundTruth, NoiseModel, Scenario, Trajectory, random_trajectory, simulate, write_simulation

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_DIVERGED = 5

log = logging.getLogger("eventcalib")


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # no "(default: None)" after options whose help already explains the fallback
        if action.default is None or action.required:
            return action.help
        return super()._get_help_string(action)


def _config_epilog() -> str:
    lines = ["configuration keys and defaults (use --config FILE or --override key=value):", ""]
    lines += ["  " + ln for ln in reference_text().splitlines()]
    return "\n".join(lines)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value configuration file")
    p.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE", help="config override; repeatable, wins over --config"
    )
    p.add_argument("--workers", type=int, help="parallel window workers (same as pipeline.workers)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eventcalib",
        description="Event-camera intrinsic calibration with an asymmetric circle grid.",
        epilog=__doc__.split("\n", 1)[1].strip() + "\n\n" + _config_epilog(),
        formatter_class=_HelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser(
        "calibrate", help="calibrate from an event file", formatter_class=_HelpFormatter, epilog=_config_epilog()
    )
    p.add_argument("--events", type=Path, required=True, help="event file (.csv text or .bin/.evb binary)")
    p.add_argument("--out", type=Path, required=True, help="report JSON path; statistics go to <stem>.stats.json")
    _add_config_args(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser(
        "detect", help="detect the grid in every window", formatter_class=_HelpFormatter, epilog=_config_epilog()
    )
    p.add_argument("--events", type=Path, required=True, help="event file")
    p.add_argument("--out", type=Path, required=True, help="detections CSV; statistics go to <stem>.stats.json")
    _add_config_args(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simulate", help="write a synthetic event stream and its ground truth", formatter_class=_HelpFormatter)
    p.add_argument("--out", type=Path, required=True, help="event file to write (.bin/.evb for binary)")
    p.add_argument("--truth", type=Path, help="ground-truth sidecar (default <stem>.truth.json)")
    p.add_argument("--windows", type=int, default=Scenario.windows, help="number of window steps to simulate")
    p.add_argument("--step-us", type=int, default=Scenario.step_us)
    p.add_argument("--min-events", type=int, default=Scenario.min_events)
    p.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "U0", "V0"),
                   default=list(Scenario.intrinsics.as_array()))
    p.add_argument("--distortion", type=float, nargs=5, metavar=("K1", "K2", "K3", "P1", "P2"),
                   default=list(Scenario.distortion.as_array()))
    p.add_argument("--pattern", type=float, nargs=3, metavar=("ROWS", "COLS", "SPACING_MM"), default=[4, 11, 24.0])
    p.add_argument("--sensor", type=int, nargs=2, metavar=("W", "H"), default=[346, 260])
    p.add_argument("--jitter", type=float, default=NoiseModel.center_jitter_sigma, help="per-event position noise (px)")
    p.add_argument("--rate", type=float, default=NoiseModel.event_rate_per_edge, help="events per rim pixel per step")
    p.add_argument("--outliers", type=float, default=NoiseModel.outlier_fraction, help="outlier fraction")
    p.add_argument("--clutter", type=float, default=NoiseModel.background_clutter_rate, help="clutter clumps per step")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--trajectory-seed", type=int, default=0)
    p.add_argument("--trajectory", type=Path, help="keyframe CSV: t_us,rx,ry,rz,tx,ty,tz (overrides the random sweep)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render a report and export plot-ready CSVs", formatter_class=_HelpFormatter)
    p.add_argument("report", type=Path, help="report JSON written by calibrate")
    p.add_argument("--truth", type=Path, help="ground-truth sidecar for the pose comparison")
    p.add_argument("--out-dir", type=Path, help="directory for CSVs (default: next to the report)")
    p.set_defaults(func=cmd_report)
    return parser


# ------------------------------------------------------------------ helpers


def _stats_path(out: Path) -> Path:
    return out.with_name(out.stem + ".stats.json") if out.suffix else out.with_name(out.name + ".stats.json")


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _require_writable_parent(path: Path) -> None:
    if not path.parent.exists() and str(path.parent) not in ("", "."):
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")


def _load_cfg(args) -> PipelineConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    overrides = list(args.override)
    if args.workers is not None:
        overrides.append(f"pipeline.workers={args.workers}")
    return load_config(args.config, overrides)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.events, "events file")
    _require_writable_parent(args.out)
    try:
        report, stats = run_calibration(args.events, cfg)
    except CalibrationInfeasible as exc:
        if exc.stats is not None:
            _write(_stats_path(args.out), dumps(exc.stats.to_json(timings=False)))
        raise
    doc = build_report(report, cfg, stats.to_json(timings=False))
    _write(args.out, dumps(doc))
    _write(_stats_path(args.out), dumps(stats.to_json(timings=False)))
    k = report.intrinsics
    print(f"{'zeta_r':<14}{report.rms:.4f} px")
    print(f"{'success rate':<14}{stats.success_rate:.4f} ({stats.successes}/{stats.possible})")
    print(f"{'views':<14}{report.N}")
    print(f"{'fx fy':<14}{k.fx:.3f} {k.fy:.3f}")
    print(f"{'u0 v0':<14}{k.u0:.3f} {k.v0:.3f}")
    print(f"{'k1 k2 k3':<14}" + " ".join(f"{c:.5f}" for c in report.distortion.as_array()[:3]))
    print(f"{'p1 p2':<14}" + " ".join(f"{c:.6f}" for c in report.distortion.as_array()[3:]))
    print(f"{'ms/window':<14}{1e3 * stats.detection_time_per_window:.1f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _load_cfg(args)
    _require_file(args.events, "events file")
    _require_writable_parent(args.out)
    dets, stats = run_detection_only(args.events, cfg)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detection", "t_ref_us", "point", "u_px", "v_px", "score"])
        for i, d in enumerate(dets):
            for j, (u, v) in enumerate(d.points):
                w.writerow([i, d.window_t_ref, j, repr(float(u)), repr(float(v)), repr(float(d.score))])
    _write(_stats_path(args.out), dumps(stats.to_json(timings=False)))
    print(f"detections {stats.successes}/{stats.possible} ({stats.success_rate:.4f})")
    for stage, n in sorted(stats.stage_failures.items()):
        print(f"  failed at {stage}: {n}")
    print(f"ms/window {1e3 * stats.detection_time_per_window:.1f}")
    return EXIT_OK


def read_trajectory_csv(path: Path) -> Trajectory:
    rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if rows.shape[1] != 7:
        raise ValueError("trajectory rows must be t_us,rx,ry,rz,tx,ty,tz")
    times = tuple(int(t) for t in rows[:, 0])
    poses = tuple(ViewPose.from_arrays(r[1:4], r[4:7]) for r in rows)
    return Trajectory(times, poses)


def cmd_simulate(args) -> int:
    rows, cols, spacing = args.pattern
    if rows != int(rows) or cols != int(cols):
        raise UsageError("--pattern rows and cols must be integers")
    if args.windows < 1:
        raise UsageError("--windows must be >= 1")
    spec = PatternSpec(int(rows), int(cols), spacing)
    geometry = SensorGeometry(*args.sensor)
    intr = Intrinsics(*args.intrinsics)
    psi = Distortion(*args.distortion)
    noise = NoiseModel(args.jitter, args.rate, args.outliers, args.clutter, args.seed)
    truth_path = args.truth or args.out.with_name(args.out.stem + ".truth.json")
    _require_writable_parent(args.out)
    _require_writable_parent(truth_path)
    if args.trajectory is not None:
        _require_file(args.trajectory, "trajectory file")
        traj = read_trajectory_csv(args.trajectory)
    else:
        duration = args.windows * args.step_us + args.step_us // 2
        traj = random_trajectory(spec, intr, psi, geometry, duration_us=duration, seed=args.trajectory_seed)
    events, gt = simulate(intr, psi, spec, traj, noise, geometry, step_us=args.step_us, min_events=args.min_events)
    write_simulation(events, gt, args.out, truth_path)
    hidden = [w.index for w in gt.windows if not w.visible]
    if hidden:
        print(f"warning: pattern not fully in frame in {len(hidden)} of {len(gt.windows)} windows", file=sys.stderr)
    print(f"wrote {len(events)} events, {len(gt.windows)} windows to {args.out} and {truth_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    _require_file(args.report, "report")
    doc = load_report(args.report)
    out_dir = args.out_dir or args.report.parent
    if not out_dir.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out_dir}")
    stem = args.report.stem
    text = render_text(doc)
    write_residuals_csv(out_dir / f"{stem}.residuals.csv", doc)
    if args.truth is not None:
        if args.truth.is_file():
            try:
                truth = GroundTruth.load(args.truth)
            except (KeyError, TypeError, ValueError) as exc:
                raise ReportSchemaError(f"{args.truth}: unreadable ground truth ({exc})") from exc
            rows = pose_errors(doc, truth)
            write_pose_csv(out_dir / f"{stem}.poses.csv", rows)
            text += render_pose_summary(rows)
        else:
            print(f"warning: ground truth {args.truth} not found; pose comparison omitted", file=sys.stderr)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ main


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        try:
            return args.func(args)
        except (UsageError, ConfigError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except CalibrationInfeasible as exc:
            print(f"calibration infeasible: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        except CalibrationDiverged as exc:
            print(f"calibration diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except (OSError, EventFormatError, ReportSchemaError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
