"""Intrinsic calibration of event cameras from an asymmetric circle grid.

Events are cut into fixed-step windows, clustered in space-time, each
cluster is fitted with a slanted cylinder, the grid is picked out of the
fitted circles and ordered, and a camera model is refined over all views.
"""

from .calibration import CalibrationInfeasible, CalibrationReport, CalibrationSettings, calibrate
from .camera import Distortion, Intrinsics, ViewPose, distort, project_points, undistort
from .clustering import ClusterParams, st_dbscan
from .config import PipelineConfig, load_config
from .cylinder import CylinderParams, fit_cylinder
from .events import EventArray, SensorGeometry, build_windows, ingest_events, normalize, write_events
from .grid import Candidate, DetectionFailure, GridDetection, detect_grid, select_grid
from .pattern import PatternSpec, pattern_object_points
from .pipeline import RunStatistics, run_calibration, run_detection_only
from .simulator import GroundTruth, NoiseModel, Scenario, Trajectory, simulate, simulate_scenario

__version__ = "0.1.0"

__all__ = [
    "CalibrationInfeasible",
    "CalibrationReport",
    "CalibrationSettings",
    "Candidate",
    "ClusterParams",
    "CylinderParams",
    "DetectionFailure",
    "Distortion",
    "EventArray",
    "GridDetection",
    "GroundTruth",
    "Intrinsics",
    "NoiseModel",
    "PatternSpec",
    "PipelineConfig",
    "RunStatistics",
    "Scenario",
    "SensorGeometry",
    "Trajectory",
    "ViewPose",
    "build_windows",
    "calibrate",
    "detect_grid",
    "distort",
    "fit_cylinder",
    "ingest_events",
    "load_config",
    "normalize",
    "pattern_object_points",
    "project_points",
    "run_calibration",
    "run_detection_only",
    "select_grid",
    "simulate",
    "simulate_scenario",
    "st_dbscan",
    "undistort",
    "write_events",
]
