"""Window-by-window orchestration: events to grid detections to a calibration.

Every window gets a :class:`WindowOutcome` whether it succeeds or not; a
failure is recorded with the stage that produced it and never affects
other windows. :class:`RunStatistics` aggregates outcomes and per-stage
wall-clock time and can be merged across workers.
"""

from __future__ import annotations

import logging
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .calibration import CalibrationInfeasible, CalibrationReport, calibrate
from .clustering import st_dbscan
from .config import PipelineConfig
from .cylinder import ClusterRejected, fit_clusters
from .events import EventArray, SpatioTemporalWindow, build_windows, ingest_events, normalize, possible_detections
from .grid import Candidate, DetectionFailure, GridDetection, detect_grid, write_candidates_csv

log = logging.getLogger(__name__)

STAGES = ("loading", "windowing", "clustering", "fitting", "grid", "calibration")


@dataclass(frozen=True)
class WindowOutcome:
    """Result of one window. ``stage`` is "ok" or the stage that failed."""

    index: int
    t_ref: int
    stage: str
    detection: Optional[GridDetection] = None
    message: str = ""
    n_clusters: int = 0
    n_candidates: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.detection is not None


@dataclass
class RunStatistics:
    possible: int = 0
    successes: int = 0
    windows: int = 0
    stage_failures: Counter = field(default_factory=Counter)
    timings: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    wall_time: float = 0.0

    @property
    def success_rate(self) -> float:
        return self.successes / self.possible if self.possible else 0.0

    @property
    def detection_time_per_window(self) -> float:
        """Mean seconds per processed window spent in clustering, fitting and grid detection."""
        if not self.windows:
            return 0.0
        return sum(self.timings[s] for s in ("clustering", "fitting", "grid")) / self.windows

    def add(self, outcome: WindowOutcome) -> None:
        self.windows += 1
        if outcome.ok:
            self.successes += 1
        else:
            self.stage_failures[outcome.stage] += 1
        for k, v in outcome.timings.items():
            self.timings[k] = self.timings.get(k, 0.0) + v

    def merge(self, other: "RunStatistics") -> "RunStatistics":
        """Combine statistics of disjoint window sets (possible counts add)."""
        out = RunStatistics(
            possible=self.possible + other.possible,
            successes=self.successes + other.successes,
            windows=self.windows + other.windows,
            stage_failures=self.stage_failures + other.stage_failures,
            timings={k: self.timings.get(k, 0.0) + other.timings.get(k, 0.0) for k in set(self.timings) | set(other.timings)},
            wall_time=self.wall_time + other.wall_time,
        )
        return out

    def to_json(self, timings: bool = True) -> dict:
        """Counts, and wall-clock figures unless ``timings`` is False.

        Leaving timings out makes the document reproducible byte for byte.
        """
        doc = {
            "possible_detections": self.possible,
            "successful_detections": self.successes,
            "processed_windows": self.windows,
            "success_rate": self.success_rate,
            "stage_failures": dict(sorted(self.stage_failures.items())),
        }
        if timings:
            doc["stage_seconds"] = {k: self.timings.get(k, 0.0) for k in STAGES}
            doc["wall_seconds"] = self.wall_time
            doc["detection_ms_per_window"] = 1e3 * self.detection_time_per_window
        return doc


def _time_scale(cfg: PipelineConfig) -> Optional[int]:
    return cfg.window.step_us if cfg.window.time_scale == "step" else None


def process_window(window: SpatioTemporalWindow, cfg: PipelineConfig, index: int = 0) -> WindowOutcome:
    """Clustering, cylinder fitting and grid detection for one window."""
    M = cfg.pattern.M
    g = cfg.sensor
    timings = {}
    clock = time.perf_counter()

    def lap(stage: str) -> None:
        nonlocal clock
        now = time.perf_counter()
        timings[stage] = timings.get(stage, 0.0) + now - clock
        clock = now

    ne = normalize(window, g, _time_scale(cfg))
    lap("windowing")
    cset = st_dbscan(ne, cfg.clustering)
    clusters = cset.clusters
    lap("clustering")
    if cfg.pipeline.debug_dir:
        _dump_labels(cfg, index, window.start + ne.source_index, cset.labels)
        clock = time.perf_counter()
    base = dict(index=index, t_ref=window.t1, n_clusters=len(clusters), timings=timings)
    if len(clusters) < M:
        return WindowOutcome(stage="clustering", message=f"{len(clusters)} clusters for {M} circles", **base)

    fits = fit_clusters(
        [ne.xyt[idx] for idx in clusters],
        g.width,
        g.height,
        weighted=cfg.erwls.weighted,
        settings=cfg.erwls.lm,
        weight_stats=cfg.erwls.weight_stats,
        weight_width=cfg.erwls.weight_width,
    )
    candidates = [
        Candidate(f.center, f.radius, j)
        for j, f in enumerate(fits)
        if not isinstance(f, ClusterRejected) and f.radius > 0 and np.all(np.isfinite(f.center))
    ]
    lap("fitting")
    base["n_candidates"] = len(candidates)
    if len(candidates) < M:
        return WindowOutcome(stage="fitting", message=f"{len(candidates)} fitted circles for {M} circles", **base)

    try:
        det = detect_grid(candidates, cfg.pattern, window.t1, cfg.grid)
    except DetectionFailure as exc:
        lap("grid")
        _dump(cfg, index, candidates, ())
        return WindowOutcome(stage=exc.stage, message=str(exc), **base)
    lap("grid")
    _dump(cfg, index, candidates, det.candidate_index)
    return WindowOutcome(stage="ok", detection=det, **base)


def _dump_labels(cfg: PipelineConfig, index: int, event_index: np.ndarray, labels: np.ndarray) -> None:
    path = Path(cfg.pipeline.debug_dir)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "labels.csv", "a", encoding="utf-8") as fh:
        if fh.tell() == 0:
            fh.write("window,event_index,label\n")
        np.savetxt(fh, np.column_stack([np.full(len(labels), index), event_index, labels]), fmt="%d", delimiter=",")


def _dump(cfg: PipelineConfig, index: int, candidates: Sequence[Candidate], selected) -> None:
    if cfg.pipeline.debug_dir:
        Path(cfg.pipeline.debug_dir).mkdir(parents=True, exist_ok=True)
        write_candidates_csv(Path(cfg.pipeline.debug_dir) / "candidates.csv", candidates, selected, index)


def _process_chunk(args) -> list[WindowOutcome]:
    windows, cfg, first = args
    return [process_window(w, cfg, first + i) for i, w in enumerate(windows)]


def _load(source, cfg: PipelineConfig) -> EventArray:
    if isinstance(source, EventArray):
        return source
    return ingest_events(source, cfg.sensor)


def _windows(events: EventArray, cfg: PipelineConfig) -> tuple[list[SpatioTemporalWindow], int]:
    possible = possible_detections(events, cfg.window.step_us)
    windows = build_windows(events, cfg.window.min_events, cfg.window.step_us)
    # the trailing partial step is not counted as a possible detection
    return windows[:possible], possible


def run_detection_only(
    source: Union[EventArray, str, os.PathLike], cfg: PipelineConfig = PipelineConfig()
) -> tuple[list[GridDetection], RunStatistics]:
    """Detect the grid in every window; failures only show up in the statistics."""
    outcomes, stats = _detect(source, cfg)
    return [o.detection for o in outcomes if o.ok], stats


def _detect(source, cfg: PipelineConfig) -> tuple[list[WindowOutcome], RunStatistics]:
    start = time.perf_counter()
    events = _load(source, cfg)
    t0 = time.perf_counter()
    windows, possible = _windows(events, cfg)
    stats = RunStatistics(possible=possible)
    stats.timings["loading"] += t0 - start
    stats.timings["windowing"] += time.perf_counter() - t0

    workers = min(cfg.pipeline.workers, max(1, len(windows)))
    if workers > 1:
        size = -(-len(windows) // workers)
        jobs = [(windows[i : i + size], cfg, i) for i in range(0, len(windows), size)]
        with ProcessPoolExecutor(workers) as pool:
            outcomes = [o for chunk in pool.map(_process_chunk, jobs) for o in chunk]
    else:
        outcomes = [process_window(w, cfg, i) for i, w in enumerate(windows)]
    for o in outcomes:
        stats.add(o)
        if not o.ok:
            log.debug("window %d failed at %s: %s", o.index, o.stage, o.message)
    stats.wall_time = time.perf_counter() - start
    return outcomes, stats


def run_calibration(
    source: Union[EventArray, str, os.PathLike], cfg: PipelineConfig = PipelineConfig()
) -> tuple[CalibrationReport, RunStatistics]:
    """Full pipeline. Raises CalibrationInfeasible (with ``stats``) when too few views succeed."""
    start = time.perf_counter()
    outcomes, stats = _detect(source, cfg)
    dets = [o.detection for o in outcomes if o.ok]
    settings = cfg.calibration.settings
    n_used = len(dets[:: settings.thin])
    if n_used < settings.min_views:
        stats.wall_time = time.perf_counter() - start
        raise CalibrationInfeasible(
            f"{n_used} usable views from {stats.possible} possible; at least {settings.min_views} are required", stats
        )
    t0 = time.perf_counter()
    try:
        report = calibrate(dets, cfg.pattern, settings)
    finally:
        stats.timings["calibration"] += time.perf_counter() - t0
        stats.wall_time = time.perf_counter() - start
    return report, stats


__all__ = [
    "STAGES",
    "RunStatistics",
    "WindowOutcome",
    "process_window",
    "run_calibration",
    "run_detection_only",
]
