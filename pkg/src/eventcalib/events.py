"""Event records, stream ingestion, spatiotemporal windowing and normalization.

Streams are held column-wise in :class:`EventArray` (int64 microsecond
timestamps, integer pixels, polarity in {-1, +1}); :class:`Event` is the
single-record view.

File formats
------------
Text: one event per line ``t_us,x,y,p`` with ``p`` in {0, 1} (0 maps to -1).
Lines starting with ``#`` are comments; a non-numeric first line is treated
as a header.

Binary: packed little-endian records ``u64 t_us, u16 x, u16 y, i8 p`` (13
bytes each), ``p`` in {-1, +1} (0 is also read as -1).
"""

from __future__ import annotations

from dataclasses import dataclass
import io
import os
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

BINARY_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
BINARY_SUFFIXES = (".bin", ".evb")


class EventFormatError(ValueError):
    """Malformed record; carries the 1-based line (text) or byte offset (binary)."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = f" (line {line})" if line is not None else f" (byte offset {offset})" if offset is not None else ""
        super().__init__(message + where)
        self.line = line
        self.offset = offset


class EventValidationError(EventFormatError):
    """Pixel coordinate outside the declared sensor geometry."""


class EventOrderingError(EventFormatError):
    """Timestamp regression beyond the allowed tolerance."""


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor width and height must be positive")


DAVIS346 = SensorGeometry(346, 260)
DVXPLORER = SensorGeometry(640, 480)


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventArray:
    """Column-oriented event sequence."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    @classmethod
    def from_columns(cls, x, y, t, p=None) -> "EventArray":
        x = np.asarray(x, dtype=np.int32)
        y = np.asarray(y, dtype=np.int32)
        t = np.asarray(t, dtype=np.int64)
        p = np.ones_like(x, dtype=np.int8) if p is None else np.asarray(p, dtype=np.int8)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValueError("event columns must have equal length")
        return cls(x, y, t, p)

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventArray":
        evs = list(events)
        return cls.from_columns([e.x for e in evs], [e.y for e in evs], [e.t for e in evs], [e.p for e in evs])

    @classmethod
    def empty(cls) -> "EventArray":
        return cls.from_columns([], [], [], [])

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, key) -> Union[Event, "EventArray"]:
        if isinstance(key, (int, np.integer)):
            return Event(int(self.x[key]), int(self.y[key]), int(self.t[key]), int(self.p[key]))
        return EventArray(self.x[key], self.y[key], self.t[key], self.p[key])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def validate(self, geometry: SensorGeometry) -> None:
        bad = (self.x < 0) | (self.x >= geometry.width) | (self.y < 0) | (self.y >= geometry.height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise EventValidationError(
                f"pixel ({self.x[i]}, {self.y[i]}) outside {geometry.width}x{geometry.height} sensor", line=i + 1
            )


# --------------------------------------------------------------------------- ingestion


def _check_order(t: np.ndarray, tolerance_us: int, locate) -> None:
    if len(t) < 2:
        return
    running_max = np.maximum.accumulate(t)
    regress = running_max[:-1] - t[1:] > tolerance_us
    if regress.any():
        i = int(np.flatnonzero(regress)[0]) + 1
        raise EventOrderingError(f"timestamp {t[i]} regresses below {running_max[i - 1]}", **locate(i))


def _parse_text(lines: Sequence[str]) -> tuple[np.ndarray, list[int]]:
    rows = []
    line_numbers = []
    first_data = True
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(" ", "").split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            vals = [int(v) for v in parts]
        except ValueError:
            if first_data and not any(ch.isdigit() for ch in parts[0]):
                first_data = False
                continue  # header
            raise EventFormatError(f"expected 't_us,x,y,p' integers, got {line!r}", line=lineno) from None
        first_data = False
        if vals[3] not in (0, 1, -1):
            raise EventFormatError(f"polarity must be 0 or 1, got {vals[3]}", line=lineno)
        rows.append(vals)
        line_numbers.append(lineno)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return arr, line_numbers


def _parse_text_fast(text: str) -> np.ndarray | None:
    """Vectorized parse; returns None when the slow path is needed for diagnostics."""
    lines = text.splitlines()
    skip = 0
    for line in lines:
        s = line.strip()
        if not s or s.startswith("#"):
            skip += 1
            continue
        if not any(ch.isdigit() for ch in s.split(",")[0]):
            skip += 1
        break
    try:
        arr = np.loadtxt(io.StringIO(text), delimiter=",", comments="#", skiprows=skip, dtype=np.int64, ndmin=2)
    except ValueError:
        return None
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.int64)
    if arr.shape[1] != 4 or not np.isin(arr[:, 3], (-1, 0, 1)).all():
        return None
    return arr


def _read_source(source) -> tuple[bytes, bool]:
    if isinstance(source, (str, os.PathLike)):
        path = Path(source)
        return path.read_bytes(), path.suffix.lower() in BINARY_SUFFIXES
    if isinstance(source, (bytes, bytearray)):
        return bytes(source), False
    data = source.read()
    if isinstance(data, str):
        data = data.encode()
    return data, False


def ingest_events(
    source: Union[str, os.PathLike, bytes, BinaryIO],
    geometry: SensorGeometry,
    binary: bool | None = None,
    order_tolerance_us: int = 0,
) -> EventArray:
    """Read, validate and return events in file order.

    ``binary`` forces the format; by default paths ending in .bin/.evb are
    binary and everything else is text.
    """
    data, is_bin = _read_source(source)
    if binary is not None:
        is_bin = binary
    if is_bin:
        if len(data) % BINARY_DTYPE.itemsize:
            raise EventFormatError(
                "truncated binary record", offset=len(data) - len(data) % BINARY_DTYPE.itemsize
            )
        rec = np.frombuffer(data, dtype=BINARY_DTYPE)
        p = rec["p"].astype(np.int8)
        if np.any((p != 1) & (p != -1) & (p != 0)):
            i = int(np.flatnonzero((p != 1) & (p != -1) & (p != 0))[0])
            raise EventFormatError(f"polarity byte {p[i]} not in {{-1, 0, 1}}", offset=i * BINARY_DTYPE.itemsize)
        p = np.where(p > 0, 1, -1).astype(np.int8)
        t = rec["t"].astype(np.int64)
        ev = EventArray.from_columns(rec["x"], rec["y"], t, p)

        def locate(i):
            return {"offset": i * BINARY_DTYPE.itemsize}

    else:
        text = data.decode("utf-8")
        arr = _parse_text_fast(text)
        line_numbers: list[int] = []
        if arr is None:
            arr, line_numbers = _parse_text(text.splitlines())
        p = np.where(arr[:, 3] > 0, 1, -1)
        ev = EventArray.from_columns(arr[:, 1], arr[:, 2], arr[:, 0], p)

        def locate(i):
            if not line_numbers:
                line_numbers.extend(_parse_text(text.splitlines())[1])
            return {"line": line_numbers[i]}

    bad = (ev.x < 0) | (ev.x >= geometry.width) | (ev.y < 0) | (ev.y >= geometry.height)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EventValidationError(
            f"pixel ({ev.x[i]}, {ev.y[i]}) outside {geometry.width}x{geometry.height} sensor", **locate(i)
        )
    _check_order(ev.t, order_tolerance_us, locate)
    return ev


def write_events(path: Union[str, os.PathLike], events: EventArray, binary: bool | None = None) -> None:
    path = Path(path)
    if binary is None:
        binary = path.suffix.lower() in BINARY_SUFFIXES
    if binary:
        rec = np.empty(len(events), dtype=BINARY_DTYPE)
        rec["t"] = events.t
        rec["x"] = events.x
        rec["y"] = events.y
        rec["p"] = events.p
        path.write_bytes(rec.tobytes())
        return
    cols = np.column_stack([events.t, events.x, events.y, (events.p > 0).astype(np.int64)])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# t_us,x,y,p\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",")


# --------------------------------------------------------------------------- windows


@dataclass(frozen=True)
class SpatioTemporalWindow:
    """A contiguous slice ``[start, stop)`` of a stream, anchored at ``anchor``."""

    events: EventArray
    start: int
    stop: int
    anchor: int

    @property
    def t1(self) -> int:
        return int(self.events.t[0])

    @property
    def tK(self) -> int:
        return int(self.events.t[-1])

    @property
    def duration(self) -> int:
        """tK - t1, clamped to >= 1 us so normalization is always defined."""
        return max(self.tK - self.t1, 1)

    def __len__(self) -> int:
        return self.stop - self.start


def window_anchors(t_first: int, t_last: int, step_us: int) -> np.ndarray:
    n = (t_last - t_first) // step_us + 1
    return t_first + step_us * np.arange(n, dtype=np.int64)


def build_windows(events: EventArray, min_events: int = 4000, step_us: int = 33_000) -> list[SpatioTemporalWindow]:
    """Count-based windows at fixed anchor spacing.

    Anchors sit every ``step_us`` from the first timestamp. Each window takes
    the first ``min_events`` events at or after its anchor; windows that run
    out of stream first are dropped. Windows of consecutive anchors may
    overlap when the event rate is low.
    """
    if min_events < 1 or step_us <= 0:
        raise ValueError("min_events must be >= 1 and step_us > 0")
    n = len(events)
    if n == 0:
        return []
    t = events.t
    windows = []
    for anchor in window_anchors(int(t[0]), int(t[-1]), step_us):
        start = int(np.searchsorted(t, anchor, side="left"))
        stop = start + min_events
        if stop > n:
            break
        windows.append(SpatioTemporalWindow(events[start:stop], start, stop, int(anchor)))
    return windows


def possible_detections(events: EventArray, step_us: int = 33_000) -> int:
    """Sequence duration divided by the window step (floored)."""
    if len(events) == 0:
        return 0
    return int((int(events.t[-1]) - int(events.t[0])) // step_us)


@dataclass(frozen=True)
class NormalizedEvents:
    """Window events mapped to [0, 1]: (x / W, y / H, (t - t1) / time_scale).

    ``xyt`` is (n, 3); row i corresponds to window event ``source_index[i]``.
    """

    xyt: np.ndarray
    source_index: np.ndarray
    t1: int
    time_scale: int
    geometry: SensorGeometry

    def __len__(self) -> int:
        return len(self.xyt)


def normalize(window: SpatioTemporalWindow, geometry: SensorGeometry, time_scale: int | None = None) -> NormalizedEvents:
    """Resolution- and duration-independent coordinates for clustering.

    ``time_scale`` defaults to the window duration (so t spans exactly [0, 1]).
    Pass a larger value, e.g. the anchor step, to express time as a fraction
    of that interval instead; it is clamped to at least the window duration
    so coordinates never leave [0, 1].
    """
    ev = window.events
    scale = window.duration if time_scale is None else max(int(time_scale), window.duration)
    xyt = np.column_stack(
        [
            ev.x / geometry.width,
            ev.y / geometry.height,
            (ev.t - window.t1).astype(np.float64) / scale,
        ]
    )
    return NormalizedEvents(xyt, np.arange(len(ev)), window.t1, scale, geometry)


def denormalize(points: NormalizedEvents) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`normalize`: integer pixels and microsecond timestamps."""
    g = points.geometry
    x = np.rint(points.xyt[:, 0] * g.width).astype(np.int64)
    y = np.rint(points.xyt[:, 1] * g.height).astype(np.int64)
    t = points.t1 + np.rint(points.xyt[:, 2] * points.time_scale).astype(np.int64)
    return x, y, t
