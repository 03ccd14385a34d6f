"""Calibration report documents: JSON schema, text rendering and CSV exports.

Report document (``schema_version`` 1)::

    schema_version   int
    intrinsics       {fx, fy, u0, v0, f_mean}          pixels
    distortion       {k1, k2, k3, p1, p2}
    zeta_r           float, per-point Euclidean RMS    pixels
    N                int, number of views
    iterations       int, converged  bool
    views            [{t_ref, rotation[3] (axis-angle, rad),
                       translation[3] (mm), rms, residuals [[du, dv], ...]}]
    config           {"section.key": value, ...}
    statistics       run statistics without timings (optional)

Residuals are observed minus projected. Every float is written with
``repr`` precision, so loading a report gives back the exact values.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .calibration import CalibrationReport
from .camera import rotation_angle_between, rodrigues
from .config import PipelineConfig

REPORT_SCHEMA_VERSION = 1

PathLike = Union[str, os.PathLike]


class ReportSchemaError(ValueError):
    pass


def build_report(report: CalibrationReport, cfg: PipelineConfig, statistics: Optional[dict] = None) -> dict:
    intr = report.intrinsics
    views = []
    rms = report.per_view_rms
    for k, pose in enumerate(report.poses):
        views.append(
            {
                "t_ref": int(report.view_t_ref[k]) if k < len(report.view_t_ref) else None,
                "rotation": list(pose.rotation),
                "translation": list(pose.translation),
                "rms": float(rms[k]),
                "residuals": report.residuals[k].tolist(),
            }
        )
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "intrinsics": {
            "fx": intr.fx,
            "fy": intr.fy,
            "u0": intr.u0,
            "v0": intr.v0,
            "f_mean": 0.5 * (intr.fx + intr.fy),
        },
        "distortion": dict(zip(("k1", "k2", "k3", "p1", "p2"), map(float, report.distortion.as_array()))),
        "zeta_r": report.rms,
        "N": report.N,
        "iterations": int(report.iterations),
        "converged": bool(report.converged),
        "views": views,
        "config": cfg.to_flat(),
    }
    if statistics is not None:
        doc["statistics"] = statistics
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_report(path: PathLike, doc: dict) -> None:
    Path(path).write_text(dumps(doc), encoding="utf-8")


def load_report(path: PathLike) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportSchemaError(f"{path}: not a JSON report ({exc})") from exc
    validate_report(doc)
    return doc


def validate_report(doc) -> None:
    if not isinstance(doc, dict):
        raise ReportSchemaError("report must be a JSON object")
    version = doc.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ReportSchemaError(f"unsupported report schema_version {version!r} (expected {REPORT_SCHEMA_VERSION})")
    for key in ("intrinsics", "distortion", "zeta_r", "N", "views", "config"):
        if key not in doc:
            raise ReportSchemaError(f"report is missing {key!r}")
    if len(doc["views"]) != doc["N"]:
        raise ReportSchemaError("view count does not match N")


def render_text(doc: dict) -> str:
    """Human-readable summary; numbers are printed at full precision."""
    k = doc["intrinsics"]
    d = doc["distortion"]
    out = io.StringIO()
    out.write("intrinsics\n")
    for name in ("fx", "fy", "u0", "v0", "f_mean"):
        out.write(f"  {name:<8}{k[name]!r}\n")
    out.write("distortion\n")
    for name in ("k1", "k2", "k3", "p1", "p2"):
        out.write(f"  {name:<8}{d[name]!r}\n")
    out.write(f"zeta_r    {doc['zeta_r']!r}\n")
    out.write(f"N         {doc['N']}\n")
    stats = doc.get("statistics")
    if stats:
        out.write(f"success   {stats['successful_detections']}/{stats['possible_detections']} ({stats['success_rate']!r})\n")
    out.write("views\n")
    out.write("  view  t_ref_us      rms_px\n")
    for i, v in enumerate(doc["views"]):
        out.write(f"  {i:<5} {v['t_ref']!s:<13} {v['rms']!r}\n")
    return out.getvalue()


def parse_text(text: str) -> dict:
    """Read back the scalar values written by :func:`render_text`."""
    values = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 2 and parts[0] in ("fx", "fy", "u0", "v0", "f_mean", "k1", "k2", "k3", "p1", "p2", "zeta_r"):
            values[parts[0]] = float(parts[1])
        elif len(parts) == 2 and parts[0] == "N":
            values["N"] = int(parts[1])
    return values


def write_residuals_csv(path: PathLike, doc: dict) -> None:
    """One row per detected point: view, t_ref, point index, du, dv."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "t_ref_us", "point", "du_px", "dv_px"])
        for i, v in enumerate(doc["views"]):
            for j, (du, dv) in enumerate(v["residuals"]):
                w.writerow([i, v["t_ref"], j, repr(float(du)), repr(float(dv))])


def pose_errors(doc: dict, truth) -> list[dict]:
    """Per-view translation (mm) and rotation (deg) error against a ground-truth sidecar.

    Views are matched to truth windows by their reference timestamp; views
    without a matching window are left out.
    """
    by_t = {w.t1: w for w in truth.windows}
    rows = []
    for i, v in enumerate(doc["views"]):
        w = by_t.get(v["t_ref"])
        if w is None:
            continue
        t_est = np.asarray(v["translation"], dtype=float)
        rot = rotation_angle_between(rodrigues(v["rotation"]), w.pose.R)
        rows.append(
            {
                "view": i,
                "t_ref_us": v["t_ref"],
                "est_translation": t_est,
                "true_translation": w.pose.tvec,
                "translation_error_mm": float(np.linalg.norm(t_est - w.pose.tvec)),
                "rotation_error_deg": math.degrees(rot),
            }
        )
    return rows


def write_pose_csv(path: PathLike, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["view", "t_ref_us", "tx_mm", "ty_mm", "tz_mm", "true_tx_mm", "true_ty_mm", "true_tz_mm",
             "translation_error_mm", "rotation_error_deg"]
        )
        for r in rows:
            w.writerow(
                [r["view"], r["t_ref_us"], *map(repr, map(float, r["est_translation"])),
                 *map(repr, map(float, r["true_translation"])), repr(r["translation_error_mm"]), repr(r["rotation_error_deg"])]
            )


def render_pose_summary(rows: list[dict]) -> str:
    if not rows:
        return "pose comparison: no views matched the ground truth\n"
    te = np.array([r["translation_error_mm"] for r in rows])
    re = np.array([r["rotation_error_deg"] for r in rows])
    return (
        f"pose comparison over {len(rows)} views\n"
        f"  mean translation error  {te.mean():.4f} mm\n"
        f"  mean rotation error     {re.mean():.4f} deg\n"
    )


__all__ = [
    "REPORT_SCHEMA_VERSION",
    "ReportSchemaError",
    "build_report",
    "dumps",
    "load_report",
    "parse_text",
    "pose_errors",
    "render_pose_summary",
    "render_text",
    "save_report",
    "validate_report",
    "write_pose_csv",
    "write_residuals_csv",
]
