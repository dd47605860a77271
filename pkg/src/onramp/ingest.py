"""Read raw trajectory files and turn them into uniform 0.2 s tracks.

Raw rows are grouped per vehicle, holes in the native 0.1 s sampling are
filled by linear interpolation, positions are smoothed with a
Savitzky-Golay filter at the native rate, decimated onto the global target
grid, and velocities/accelerations are re-derived from the smoothed
positions.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .kinematics import Track, savitzky_golay_smooth

logger = logging.getLogger(__name__)

FEET = 0.3048
REQUIRED = ("vehicle_id", "timestamp", "x", "y", "lane_id")
OPTIONAL = ("v", "u", "a", "e")
CANONICAL_COLUMNS = ("vehicle_id", "t", "x", "y", "v", "u", "a", "e", "lane_id")


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    vehicle_id: int
    timestamp: float
    x: float
    y: float
    lane_id: int
    v: float = math.nan
    u: float = math.nan
    a: float = math.nan
    e: float = math.nan


@dataclass
class Schema:
    """How to read a delimiter-separated trajectory file.

    ``columns`` maps each field of :class:`RawRecord` to a header name, or to
    a zero-based column index when the file has no header.  Timestamps are
    multiplied by ``time_scale`` (e.g. 0.1 for 10 Hz frame numbers, 0.001
    for milliseconds); lengths are converted from feet when ``length_unit``
    is ``"ft"``.
    """

    columns: dict = field(default_factory=lambda: {k: k for k in REQUIRED + OPTIONAL})
    delimiter: str | None = ","  # None splits on whitespace
    header: bool = True
    time_scale: float = 1.0
    length_unit: str = "m"
    lanes: tuple[int, ...] | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        d = dict(d)
        if d.get("lanes") is not None:
            d["lanes"] = tuple(d["lanes"])
        return cls(**d)

    @classmethod
    def ngsim(cls) -> "Schema":
        """Headerless whitespace layout of the public NGSIM I-80 text files."""
        return cls(columns={"vehicle_id": 0, "timestamp": 1, "y": 4, "x": 5, "v": 11,
                            "a": 12, "lane_id": 13},
                   delimiter=None, header=False, time_scale=0.1, length_unit="ft")

    @classmethod
    def canonical(cls) -> "Schema":
        cols = {k: k for k in ("vehicle_id", "x", "y", "v", "u", "a", "e", "lane_id")}
        cols["timestamp"] = "t"
        return cls(columns=cols)


@dataclass
class RawSeries:
    """Time-sorted raw samples of one vehicle, column-wise."""

    vehicle_id: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lane_ids: np.ndarray
    v: np.ndarray
    u: np.ndarray
    a: np.ndarray
    e: np.ndarray

    def __len__(self):
        return len(self.t)

    def records(self) -> Iterator[RawRecord]:
        for k in range(len(self)):
            yield RawRecord(self.vehicle_id, float(self.t[k]), float(self.x[k]), float(self.y[k]),
                            int(self.lane_ids[k]), float(self.v[k]), float(self.u[k]),
                            float(self.a[k]), float(self.e[k]))

    @classmethod
    def from_records(cls, records: Iterable[RawRecord]) -> "RawSeries":
        recs = sorted(records, key=lambda r: r.timestamp)
        if not recs:
            raise ValueError("no records")
        col = lambda name: np.array([getattr(r, name) for r in recs], dtype=float)
        return cls(recs[0].vehicle_id, col("timestamp"), col("x"), col("y"),
                   np.array([r.lane_id for r in recs], dtype=int),
                   col("v"), col("u"), col("a"), col("e"))


def _lines(path: Path, delimiter):
    with open(path, newline="") as fh:
        if delimiter is None:
            for n, line in enumerate(fh, start=1):
                yield n, line.split()
        else:
            for n, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
                yield n, row


def parse_trajectory_file(path, schema: Schema | None = None) -> dict[int, RawSeries]:
    """Parse a trajectory file into per-vehicle series sorted by time."""
    schema = schema or Schema()
    path = Path(path)
    missing = [k for k in REQUIRED if k not in schema.columns]
    if missing:
        raise SchemaError(f"schema lacks required column(s): {', '.join(missing)}")
    unit = FEET if schema.length_unit == "ft" else 1.0
    if schema.length_unit not in ("m", "ft"):
        raise SchemaError(f"unknown length unit {schema.length_unit!r}")

    rows: dict[int, list[tuple]] = {}
    index = None
    fields = [k for k in REQUIRED + OPTIONAL if k in schema.columns]
    for lineno, cells in _lines(path, schema.delimiter):
        if not cells or all(not c.strip() for c in cells):
            continue
        if index is None:
            if schema.header:
                names = [c.strip() for c in cells]
                absent = [schema.columns[k] for k in REQUIRED if schema.columns[k] not in names]
                if absent:
                    raise SchemaError(f"{path}: header lacks column(s) {absent}")
                # optional columns missing from the header are read as NaN
                index = {k: names.index(schema.columns[k]) for k in fields
                         if schema.columns[k] in names}
                continue
            index = {k: int(schema.columns[k]) for k in fields}
        try:
            vals = {k: cells[j].strip() for k, j in index.items()}
            vid = int(float(vals["vehicle_id"]))
            lane = int(float(vals["lane_id"]))
            t = float(vals["timestamp"]) * schema.time_scale
            nums = [float(vals[k]) if k in vals else math.nan for k in ("x", "y", "v", "u", "a", "e")]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}:{lineno}: malformed row ({exc})") from None
        if not math.isfinite(t) or t < 0:
            raise ParseError(f"{path}:{lineno}: bad timestamp {t}")
        if not (math.isfinite(nums[0]) and math.isfinite(nums[1])):
            raise ParseError(f"{path}:{lineno}: non-finite position")
        if schema.lanes is not None and lane not in schema.lanes:
            raise ParseError(f"{path}:{lineno}: lane {lane} outside configured lanes")
        rows.setdefault(vid, []).append((t, *(n * unit for n in nums), lane))

    out = {}
    for vid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        arr = np.array([r[:7] for r in recs], dtype=float)
        out[vid] = RawSeries(vid, arr[:, 0], arr[:, 1], arr[:, 2],
                             np.array([r[7] for r in recs], dtype=int),
                             arr[:, 3], arr[:, 4], arr[:, 5], arr[:, 6])
    return out


def fill_missing_steps(series: RawSeries, native_dt: float = 0.1) -> RawSeries:
    """Insert linearly interpolated samples at skipped native time steps.

    Inserted lane IDs copy the earlier bracketing sample.  Duplicate
    timestamps keep their first occurrence.
    """
    if native_dt <= 0:
        raise ValueError("native_dt must be positive")
    if len(series) < 2:
        raise ValueError(f"vehicle {series.vehicle_id}: need at least 2 records to interpolate")
    frames = np.rint(series.t / native_dt).astype(np.int64)
    frames, first = np.unique(frames, return_index=True)
    full = np.arange(frames[0], frames[-1] + 1)
    if full.size == frames.size:
        if first.size == len(series):
            return series
    interp = lambda col: np.interp(full, frames, col[first])
    prev = np.searchsorted(frames, full, side="right") - 1
    return RawSeries(series.vehicle_id, full * native_dt, interp(series.x), interp(series.y),
                     series.lane_ids[first][prev], interp(series.v), interp(series.u),
                     interp(series.a), interp(series.e))


def resample_track(series: RawSeries, target_dt: float = 0.2, native_dt: float = 0.1,
                   window: int = 11, poly_order: int = 3) -> Track | None:
    """Smooth a gap-free series at the native rate and decimate to ``target_dt``.

    Kept samples are those whose absolute time is a multiple of
    ``target_dt`` so every track lands on one shared grid.  Returns None
    when the series is too short to smooth or differentiate.
    """
    ratio = target_dt / native_dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValueError(f"target_dt {target_dt} is not an integer multiple of native_dt {native_dt}")
    ratio = int(round(ratio))
    if len(series) < window:
        return None
    xs = savitzky_golay_smooth(series.x, window, poly_order)
    ys = savitzky_golay_smooth(series.y, window, poly_order)
    frames = np.rint(series.t / native_dt).astype(np.int64)
    keep = np.flatnonzero(frames % ratio == 0)
    if keep.size < 3:
        return None
    t0 = frames[keep[0]] * native_dt
    return Track.from_positions(series.vehicle_id, round(t0, 9), target_dt, xs[keep], ys[keep],
                                series.lane_ids[keep])


def ingest_file(path, schema: Schema | None = None, native_dt: float = 0.1, target_dt: float = 0.2,
                window: int = 11, poly_order: int = 3) -> tuple[list[Track], dict]:
    """Parse, repair and resample every vehicle in a file."""
    raw = parse_trajectory_file(path, schema)
    tracks, short = [], 0
    for vid in sorted(raw):
        series = raw[vid]
        if len(series) < 2:
            short += 1
            continue
        tr = resample_track(fill_missing_steps(series, native_dt), target_dt, native_dt,
                            window, poly_order)
        if tr is None:
            short += 1
            continue
        tracks.append(tr)
    return tracks, {"vehicles": len(raw), "tracks": len(tracks), "too_short": short}


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tracks(tracks: Iterable[Track], path) -> None:
    """Canonical track file: one row per vehicle and 0.2 s step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_COLUMNS)
        for tr in tracks:
            for k, t in enumerate(tr.times):
                w.writerow([tr.vehicle_id, _fmt(round(t, 9)), _fmt(tr.x[k]), _fmt(tr.y[k]),
                            _fmt(tr.v[k]), _fmt(tr.u[k]), _fmt(tr.a[k]), _fmt(tr.e[k]),
                            int(tr.lane_ids[k])])


def read_tracks(path, dt: float = 0.2) -> list[Track]:
    """Load a canonical track file written by :func:`write_tracks`."""
    raw = parse_trajectory_file(path, Schema.canonical())
    tracks = []
    for vid in sorted(raw):
        s = raw[vid]
        tracks.append(Track(vid, round(float(s.t[0]), 9), dt, s.x, s.y, s.v, s.u, s.a, s.e, s.lane_ids))
    return tracks
