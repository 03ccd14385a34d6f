"""Synthetic event streams of a camera sweeping an asymmetric circle grid.

Events are drawn on the projected rims of the pattern circles at random
times, so every circle fires regardless of motion direction. Each event is
projected with the pose interpolated at its own timestamp, then jittered,
rounded to a pixel and given a random polarity. Uniform outliers around the
rims and dense background clumps can be mixed in. Everything is driven by a
single seeded generator, so a fixed seed reproduces the stream exactly.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .camera import Distortion, Intrinsics, ViewPose, project_points, rodrigues, rotvec_from_matrix
from .events import DAVIS346, EventArray, SensorGeometry, build_windows, write_events
from .pattern import PatternSpec, pattern_object_points

GT_SCHEMA_VERSION = 1
OUTLIER = -1
CLUTTER = -2


@dataclass(frozen=True)
class Trajectory:
    """Pose keyframes (microseconds, pattern-to-camera) with lerp/slerp between."""

    times: tuple[int, ...]
    poses: tuple[ViewPose, ...]

    def __post_init__(self) -> None:
        if len(self.times) < 2 or len(self.times) != len(self.poses):
            raise ValueError("a trajectory needs at least two keyframes with one pose each")
        if np.any(np.diff(np.asarray(self.times)) <= 0):
            raise ValueError("keyframe times must be strictly increasing")

    @property
    def start(self) -> int:
        return int(self.times[0])

    @property
    def end(self) -> int:
        return int(self.times[-1])

    def sample(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Rotation matrices (n, 3, 3) and translations (n, 3) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        kt = np.asarray(self.times, dtype=float)
        t = np.clip(t, kt[0], kt[-1])
        seg = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, len(kt) - 2)
        s = (t - kt[seg]) / (kt[seg + 1] - kt[seg])
        Rk = np.array([p.R for p in self.poses])
        tk = np.array([p.tvec for p in self.poses])
        # relative rotation of each segment as a rotation vector
        rel = np.array([rotvec_from_matrix(Rk[i].T @ Rk[i + 1]) for i in range(len(kt) - 1)])
        R = Rk[seg] @ _rodrigues_many(rel[seg] * s[:, None])
        trans = tk[seg] + (tk[seg + 1] - tk[seg]) * s[:, None]
        return R, trans

    def pose_at(self, t: float) -> ViewPose:
        R, tr = self.sample([t])
        return ViewPose.from_arrays(rotvec_from_matrix(R[0]), tr[0])


def _rodrigues_many(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w, axis=1)
    small = theta < 1e-12
    th = np.where(small, 1.0, theta)
    k = w / th[:, None]
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    s = np.where(small, 0.0, np.sin(theta))[:, None, None]
    c = np.where(small, 0.0, 1.0 - np.cos(theta))[:, None, None]
    return np.eye(3)[None] + s * K + c * (K @ K)


@dataclass(frozen=True)
class NoiseModel:
    center_jitter_sigma: float = 0.3
    # events per pixel of projected rim per window step
    event_rate_per_edge: float = 60.0
    outlier_fraction: float = 0.05
    # expected dense clumps per window step
    background_clutter_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.center_jitter_sigma, self.event_rate_per_edge, self.outlier_fraction, self.background_clutter_rate) < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.outlier_fraction >= 1:
            raise ValueError("outlier_fraction must be < 1")


@dataclass
class WindowTruth:
    index: int
    anchor: int
    t1: int
    visible: bool
    pose: ViewPose
    centers: np.ndarray  # (M, 2) px, pattern order

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "anchor": self.anchor,
            "t1": self.t1,
            "visible": self.visible,
            "pose": {"rotation": list(self.pose.rotation), "translation": list(self.pose.translation)},
            "centers": np.round(self.centers, 9).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "WindowTruth":
        pose = ViewPose.from_arrays(d["pose"]["rotation"], d["pose"]["translation"])
        return cls(int(d["index"]), int(d["anchor"]), int(d["t1"]), bool(d["visible"]), pose, np.asarray(d["centers"], dtype=float).reshape(-1, 2))


@dataclass
class GroundTruth:
    intrinsics: Intrinsics
    distortion: Distortion
    spec: PatternSpec
    geometry: SensorGeometry
    noise: NoiseModel
    step_us: int
    min_events: int
    windows: list[WindowTruth] = field(default_factory=list)
    # per event: circle index, OUTLIER or CLUTTER
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_json(self) -> dict:
        return {
            "schema_version": GT_SCHEMA_VERSION,
            "intrinsics": asdict(self.intrinsics),
            "distortion": asdict(self.distortion),
            "pattern": asdict(self.spec),
            "geometry": asdict(self.geometry),
            "noise": asdict(self.noise),
            "step_us": self.step_us,
            "min_events": self.min_events,
            "windows": [w.to_json() for w in self.windows],
        }

    def save(self, path: Union[str, os.PathLike]) -> None:
        """JSON sidecar plus ``<stem>.labels.npy`` holding per-event labels."""
        path = Path(path)
        doc = self.to_json()
        labels_path = path.with_name(path.stem + ".labels.npy")
        doc["labels_file"] = labels_path.name
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        with open(labels_path, "wb") as fh:
            np.save(fh, self.labels.astype(np.int16), allow_pickle=False)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "GroundTruth":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("schema_version") != GT_SCHEMA_VERSION:
            raise ValueError(f"unsupported ground-truth schema {doc.get('schema_version')!r}")
        labels = np.zeros(0, dtype=np.int64)
        lf = doc.get("labels_file")
        if lf and (path.parent / lf).exists():
            labels = np.load(path.parent / lf, allow_pickle=False).astype(np.int64)
        return cls(
            Intrinsics(**doc["intrinsics"]),
            Distortion(**doc["distortion"]),
            PatternSpec(**doc["pattern"]),
            SensorGeometry(**doc["geometry"]),
            NoiseModel(**doc["noise"]),
            int(doc["step_us"]),
            int(doc["min_events"]),
            [WindowTruth.from_json(w) for w in doc["windows"]],
            labels,
        )


def emit_ground_truth_centers(gt: GroundTruth) -> dict[int, np.ndarray]:
    """Window index -> (M, 2) true centers for every visible window."""
    return {w.index: w.centers for w in gt.windows if w.visible}


def _project_at(obj: np.ndarray, R: np.ndarray, t: np.ndarray, intr: Intrinsics, psi: Distortion) -> tuple[np.ndarray, np.ndarray]:
    """Per-point pose projection; returns pixels (n, 2) and depth (n,)."""
    Xc = np.einsum("nij,nj->ni", R, obj) + t
    z = Xc[:, 2]
    zs = np.where(np.abs(z) < 1e-9, 1e-9, z)
    x, y = Xc[:, 0] / zs, Xc[:, 1] / zs
    k1, k2, k3, p1, p2 = psi.as_array()
    r2 = x * x + y * y
    rad = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.column_stack([intr.fx * xd + intr.u0, intr.fy * yd + intr.v0]), z


def _rim_length_px(spec: PatternSpec, radius: float, pose: ViewPose, intr: Intrinsics, psi: Distortion, n: int = 32) -> np.ndarray:
    """Projected perimeter of every circle, in pixels."""
    obj = pattern_object_points(spec)
    th = np.linspace(0, 2 * np.pi, n, endpoint=False)
    ring = np.column_stack([np.cos(th), np.sin(th), np.zeros(n)]) * radius
    pts = (obj[:, None, :] + ring[None]).reshape(-1, 3)
    uv = project_points(pts, pose.rvec, pose.tvec, intr, psi).reshape(spec.M, n, 2)
    seg = np.roll(uv, -1, axis=1) - uv
    return np.linalg.norm(seg, axis=2).sum(axis=1)


def simulate(
    intrinsics: Intrinsics,
    distortion: Distortion,
    spec: PatternSpec,
    trajectory: Trajectory,
    noise: NoiseModel = NoiseModel(),
    geometry: SensorGeometry = DAVIS346,
    circle_radius: Optional[float] = None,
    step_us: int = 33_000,
    min_events: int = 4000,
) -> tuple[EventArray, GroundTruth]:
    """Generate an event stream and its ground truth.

    ``circle_radius`` is the physical circle radius in mm (default 0.2 times
    the diagonal spacing). Event counts per step are deterministic: each
    circle gets round(rate * projected perimeter) rim events.
    """
    radius = 0.2 * spec.diagonal_spacing if circle_radius is None else float(circle_radius)
    if not 0 < radius < 0.5 * spec.diagonal_spacing:
        raise ValueError("circle radius must be positive and keep circles apart")
    rng = np.random.default_rng(noise.seed)
    obj = pattern_object_points(spec)
    W, H = geometry.width, geometry.height
    t0, t_end = trajectory.start, trajectory.end

    cols_t, cols_uv, cols_lab = [], [], []
    for a in range(t0, t_end, step_us):
        b = min(a + step_us, t_end)
        pose = trajectory.pose_at(0.5 * (a + b))
        frac = (b - a) / step_us
        counts = np.rint(noise.event_rate_per_edge * frac * _rim_length_px(spec, radius, pose, intrinsics, distortion)).astype(int)
        n_rim = int(counts.sum())
        n_out = int(round(noise.outlier_fraction / (1 - noise.outlier_fraction) * n_rim))

        circle = np.repeat(np.arange(spec.M), counts)
        t_rim = rng.uniform(a, b, n_rim)
        th = rng.uniform(0, 2 * np.pi, n_rim)
        local = np.column_stack([np.cos(th), np.sin(th), np.zeros(n_rim)]) * radius
        R, tr = trajectory.sample(t_rim)
        uv_rim, _ = _project_at(obj[circle] + local, R, tr, intrinsics, distortion)

        # outliers scattered around the rims
        oc = rng.integers(0, spec.M, n_out)
        t_out = rng.uniform(a, b, n_out)
        rho = radius * 2.5 * np.sqrt(rng.uniform(0, 1, n_out))
        phi = rng.uniform(0, 2 * np.pi, n_out)
        local_o = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), np.zeros(n_out)])
        R_o, tr_o = trajectory.sample(t_out)
        uv_out, _ = _project_at(obj[oc] + local_o, R_o, tr_o, intrinsics, distortion)

        parts_t, parts_uv, parts_lab = [t_rim, t_out], [uv_rim, uv_out], [circle, np.full(n_out, OUTLIER)]
        n_clumps = rng.poisson(noise.background_clutter_rate * frac) if noise.background_clutter_rate > 0 else 0
        if n_clumps:
            med_len = float(np.median(counts)) if len(counts) else 50.0
            r_px = float(np.median(_rim_length_px(spec, radius, pose, intrinsics, distortion))) / (2 * np.pi)
            for _ in range(n_clumps):
                c = rng.uniform([0, 0], [W, H])
                rc = r_px * rng.uniform(0.5, 2.0)
                ecc = rng.uniform(0.6, 1.0)
                rot = rng.uniform(0, np.pi)
                n_c = int(med_len * rng.uniform(0.5, 1.5))
                drift = rng.normal(0, 2.0, 2)
                tc = rng.uniform(a, b, n_c)
                ang = rng.uniform(0, 2 * np.pi, n_c)
                e = np.column_stack([rc * np.cos(ang), ecc * rc * np.sin(ang)])
                cr, sr = math.cos(rot), math.sin(rot)
                e = e @ np.array([[cr, sr], [-sr, cr]]) + c + np.outer((tc - a) / step_us, drift)
                parts_t.append(tc)
                parts_uv.append(e)
                parts_lab.append(np.full(n_c, CLUTTER))
        cols_t.append(np.concatenate(parts_t))
        cols_uv.append(np.concatenate(parts_uv))
        cols_lab.append(np.concatenate(parts_lab))

    t_all = np.concatenate(cols_t) if cols_t else np.zeros(0)
    uv = np.concatenate(cols_uv) if cols_uv else np.zeros((0, 2))
    lab = np.concatenate(cols_lab) if cols_lab else np.zeros(0, dtype=np.int64)
    if noise.center_jitter_sigma > 0:
        uv = uv + rng.normal(0.0, noise.center_jitter_sigma, uv.shape)
    pix = np.rint(uv)
    inside = np.isfinite(pix).all(axis=1) & (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
    pol = rng.integers(0, 2, len(t_all)) * 2 - 1
    t_int = np.floor(t_all).astype(np.int64)
    t_int, pix, lab, pol = t_int[inside], pix[inside].astype(np.int64), lab[inside].astype(np.int64), pol[inside]
    order = np.argsort(t_int, kind="stable")
    events = EventArray.from_columns(pix[order, 0], pix[order, 1], t_int[order], pol[order])
    labels = lab[order]

    gt = GroundTruth(intrinsics, distortion, spec, geometry, noise, step_us, min_events, [], labels)
    if len(events):
        for k, win in enumerate(build_windows(events, min_events=min_events, step_us=step_us)):
            pose = trajectory.pose_at(win.t1)
            c, z = _project_at(obj, np.repeat(pose.R[None], spec.M, axis=0), np.repeat(pose.tvec[None], spec.M, axis=0), intrinsics, distortion)
            visible = bool(np.all(z > 0) and np.all((c[:, 0] >= 0) & (c[:, 0] < W) & (c[:, 1] >= 0) & (c[:, 1] < H)))
            gt.windows.append(WindowTruth(k, int(win.anchor), int(win.t1), visible, pose, c))
    return events, gt


# scenarios ----------------------------------------------------------------


def look_at_pose(spec: PatternSpec, distance: float, tilt_x: float, tilt_y: float, roll: float, offset=(0.0, 0.0)) -> ViewPose:
    """Pose viewing the pattern center from ``distance`` mm with the given tilts (rad)."""
    ctr = pattern_object_points(spec).mean(axis=0)
    R = rodrigues([tilt_x, 0, 0]) @ rodrigues([0, tilt_y, 0]) @ rodrigues([0, 0, roll])
    t = -R @ ctr + np.array([offset[0], offset[1], distance])
    return ViewPose.from_arrays(rotvec_from_matrix(R), t)


def pattern_visible(pose: ViewPose, spec: PatternSpec, intr: Intrinsics, psi: Distortion, geometry: SensorGeometry, margin: float = 10.0) -> bool:
    obj = pattern_object_points(spec)
    Xc = obj @ pose.R.T + pose.tvec
    if np.any(Xc[:, 2] <= 0):
        return False
    uv = project_points(obj, pose.rvec, pose.tvec, intr, psi)
    return bool(
        np.all(uv[:, 0] >= margin) and np.all(uv[:, 0] < geometry.width - margin)
        and np.all(uv[:, 1] >= margin) and np.all(uv[:, 1] < geometry.height - margin)
    )


def random_trajectory(
    spec: PatternSpec,
    intr: Intrinsics,
    psi: Distortion,
    geometry: SensorGeometry = DAVIS346,
    duration_us: int = 2_000_000,
    keyframe_us: int = 200_000,
    distance: tuple[float, float] = (280.0, 360.0),
    max_tilt_deg: float = 35.0,
    seed: int = 0,
) -> Trajectory:
    """Hand-held style sweep: random visible keyframes joined smoothly."""
    rng = np.random.default_rng(seed)
    times = list(range(0, duration_us + 1, keyframe_us))
    if times[-1] < duration_us:
        times.append(duration_us)
    poses = []
    for _ in times:
        for _attempt in range(1000):
            tilt = np.radians(max_tilt_deg)
            pose = look_at_pose(
                spec,
                rng.uniform(*distance),
                rng.uniform(-tilt, tilt),
                rng.uniform(-tilt, tilt),
                rng.uniform(-0.3, 0.3),
                rng.normal(0, 10.0, 2),
            )
            if pattern_visible(pose, spec, intr, psi, geometry, margin=15.0):
                break
        else:
            raise ValueError("could not place the pattern inside the frame; move the camera back")
        poses.append(pose)
    return Trajectory(tuple(times), tuple(poses))


@dataclass(frozen=True)
class Scenario:
    intrinsics: Intrinsics = Intrinsics(350.0, 352.0, 160.0, 120.0)
    distortion: Distortion = Distortion(-0.34, 0.12, -0.02, -0.0006, -0.0005)
    spec: PatternSpec = PatternSpec(4, 11, 24.0)
    geometry: SensorGeometry = DAVIS346
    noise: NoiseModel = NoiseModel()
    windows: int = 60
    step_us: int = 33_000
    min_events: int = 4000
    trajectory_seed: int = 0


def simulate_scenario(sc: Scenario = Scenario()) -> tuple[EventArray, GroundTruth]:
    """Default sweep: ``windows`` steps of a random visible trajectory."""
    duration = sc.windows * sc.step_us + sc.step_us // 2
    traj = random_trajectory(sc.spec, sc.intrinsics, sc.distortion, sc.geometry, duration_us=duration, seed=sc.trajectory_seed)
    return simulate(sc.intrinsics, sc.distortion, sc.spec, traj, sc.noise, sc.geometry, step_us=sc.step_us, min_events=sc.min_events)


def write_simulation(events: EventArray, gt: GroundTruth, events_path, truth_path, binary: bool | None = None) -> None:
    write_events(events_path, events, binary=binary)
    gt.save(truth_path)
