"""Pipeline configuration and its flat ``section.key = value`` text form.

A config file holds one assignment per line; ``#`` starts a comment and
blank lines are ignored. Values are parsed according to the type of the
default. Precedence is: command-line overrides, then the file, then the
defaults below.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from typing import Any, Iterable, Mapping, Union

from .calibration import CalibrationSettings
from .clustering import ClusterParams
from .cylinder import WELSCH_WIDTH
from .events import SensorGeometry
from .grid import SelectionParams
from .nlls import LMSettings
from .pattern import PatternSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WindowConfig:
    min_events: int = 4000
    step_us: int = 33_000
    # "step": t / step_us, "duration": t / window duration
    time_scale: str = "step"

    def __post_init__(self) -> None:
        if self.min_events < 1 or self.step_us <= 0:
            raise ValueError("window.min_events must be >= 1 and window.step_us > 0")
        if self.time_scale not in ("step", "duration"):
            raise ValueError("window.time_scale must be 'step' or 'duration'")


@dataclass(frozen=True)
class FitConfig:
    weighted: bool = True
    weight_stats: str = "robust"
    weight_width: float = WELSCH_WIDTH
    max_iters: int = 50
    tol_step: float = 1e-5
    tol_cost: float = 1e-9

    def __post_init__(self) -> None:
        if self.weight_stats not in ("robust", "moments"):
            raise ValueError("erwls.weight_stats must be 'robust' or 'moments'")
        if not self.weight_width > 0:
            raise ValueError("erwls.weight_width must be positive")

    @property
    def lm(self) -> LMSettings:
        return LMSettings(max_iters=self.max_iters, tol_step=self.tol_step, tol_cost=self.tol_cost)


@dataclass(frozen=True)
class CalibrationConfig:
    tangential: bool = True
    pixel_units: bool = False
    min_views: int = 10
    thin: int = 1
    max_iters: int = 100

    def __post_init__(self) -> None:
        if self.min_views < 3 or self.thin < 1:
            raise ValueError("calibration.min_views must be >= 3 and calibration.thin >= 1")

    @property
    def settings(self) -> CalibrationSettings:
        return CalibrationSettings(
            tangential=self.tangential,
            pixel_units=self.pixel_units,
            min_views=self.min_views,
            thin=self.thin,
            lm=LMSettings(max_iters=self.max_iters, tol_step=1e-12, tol_cost=1e-14),
        )


@dataclass(frozen=True)
class RunConfig:
    workers: int = 1
    debug_dir: str = ""

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError("pipeline.workers must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    sensor: SensorGeometry = SensorGeometry(346, 260)
    pattern: PatternSpec = PatternSpec(4, 11, 24.0)
    window: WindowConfig = WindowConfig()
    clustering: ClusterParams = ClusterParams()
    erwls: FitConfig = FitConfig()
    grid: SelectionParams = SelectionParams()
    calibration: CalibrationConfig = CalibrationConfig()
    pipeline: RunConfig = RunConfig()

    def __post_init__(self) -> None:
        if self.grid.delta_max < 0:
            raise ValueError("grid.delta_max must be >= 0")
        if self.pattern.M < 5:
            raise ValueError("the pattern needs at least five circles")

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for sec in fields(self):
            obj = getattr(self, sec.name)
            for f in fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_flat().items())


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(raw: str, like: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = text.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply(cfg: PipelineConfig, values: Mapping[str, str]) -> PipelineConfig:
    """Return ``cfg`` with dotted-key string values applied."""
    sections = {f.name for f in fields(cfg)}
    grouped: dict[str, dict[str, Any]] = {}
    for key, raw in values.items():
        sec, _, name = key.partition(".")
        if sec not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, sec)
        names = {f.name for f in fields(obj)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        grouped.setdefault(sec, {})[name] = _parse(raw, getattr(obj, name), key)
    try:
        updates = {sec: replace(getattr(cfg, sec), **kv) for sec, kv in grouped.items()}
        return replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, os.PathLike, None] = None, overrides: Iterable[str] = ()) -> PipelineConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = PipelineConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = apply(cfg, parse_assignments(fh, str(path)))
    if overrides:
        cfg = apply(cfg, parse_assignments(overrides, "--override"))
    return cfg


def reference_text() -> str:
    """Every key with its default, for --help and documentation."""
    return PipelineConfig().to_text()


def from_flat(flat: Mapping[str, Any]) -> PipelineConfig:
    return apply(PipelineConfig(), {k: _fmt(v) for k, v in flat.items()})


__all__ = [
    "CalibrationConfig",
    "ConfigError",
    "FitConfig",
    "PipelineConfig",
    "RunConfig",
    "WindowConfig",
    "apply",
    "from_flat",
    "load_config",
    "parse_assignments",
    "reference_text",
]
