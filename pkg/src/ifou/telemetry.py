"""Telemetry ingestion: raw fixes to daily centroid tracks to per-axis trajectories.

Input is CSV with header ``id,timestamp,lon,lat``. Timestamps are RFC 3339
date-times or bare ``YYYY-MM-DD`` dates; days are cut at UTC midnight.
"""

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone

import numpy as np

from ._io import write_rows
from .errors import FormatError, InsufficientDataError
from .kernels import TimeGrid, Trajectory

log = logging.getLogger(__name__)

HEADER = ("id", "timestamp", "lon", "lat")


@dataclass(frozen=True)
class TelemetryRecord:
    animal_id: str
    timestamp: datetime
    lon: float
    lat: float


@dataclass
class Reject:
    line: int
    row: list
    reason: str


@dataclass
class ParseReport:
    """Accepted records (sorted by id, then time) plus rejected rows."""

    records: list = field(default_factory=list)
    rejects: list = field(default_factory=list)

    @property
    def total(self):
        return len(self.records) + len(self.rejects)

    def ids(self):
        return sorted({r.animal_id for r in self.records})


def parse_timestamp(text):
    """Parse an RFC 3339 date-time or ``YYYY-MM-DD`` date into an aware UTC datetime.

    Naive date-times are taken as UTC.
    """
    text = text.strip()
    if len(text) == 10:
        d = date.fromisoformat(text)
        return datetime(d.year, d.month, d.day, tzinfo=timezone.utc)
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text.replace(" ", "T", 1))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def _parse_row(row):
    if len(row) != 4:
        raise ValueError(f"expected 4 fields, got {len(row)}")
    animal, ts, lon_txt, lat_txt = (x.strip() for x in row)
    if not animal:
        raise ValueError("missing id")
    try:
        stamp = parse_timestamp(ts)
    except ValueError:
        raise ValueError("unparseable timestamp") from None
    try:
        lon, lat = float(lon_txt), float(lat_txt)
    except ValueError:
        raise ValueError("non-numeric coordinate") from None
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise ValueError("non-finite coordinate")
    if not -90.0 <= lat <= 90.0:
        raise ValueError("latitude out of range")
    if not -180.0 <= lon <= 180.0:
        raise ValueError("longitude out of range")
    return TelemetryRecord(animal, stamp, lon, lat)


def parse_csv(stream):
    """Read telemetry CSV from a text stream (or a string).

    Returns
    -------
    ParseReport
        Malformed rows land in ``rejects`` with a reason; nothing is dropped
        silently.

    Raises
    ------
    FormatError
        If the header is missing or wrong.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    report = ParseReport()
    header = next(reader, None)
    if header is None:
        log.warning("telemetry input is empty")
        return report
    if tuple(h.strip().lower() for h in header) != HEADER:
        raise FormatError(f"expected header {','.join(HEADER)}, got {','.join(header)}")
    for line, row in enumerate(reader, start=2):
        if not row or all(not x.strip() for x in row):
            continue
        try:
            report.records.append(_parse_row(row))
        except ValueError as exc:
            report.rejects.append(Reject(line, row, str(exc)))
    if report.rejects:
        log.warning("%d telemetry rows rejected", len(report.rejects))
    if not report.records and not report.rejects:
        log.warning("telemetry input has a header but no rows")
    report.records.sort(key=lambda r: (r.animal_id, r.timestamp))
    return report


def read_csv(path):
    with open(path, newline="") as fh:
        return parse_csv(fh)


@dataclass
class DailyTrack:
    """Per-day centroids; ``days`` are integer offsets from the first day."""

    animal_id: str
    days: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    counts: np.ndarray = None

    def __post_init__(self):
        self.days = np.asarray(self.days, dtype=int)
        if self.days.size and (self.days[0] != 0 or np.any(np.diff(self.days) <= 0)):
            raise ValueError("days must start at 0 and increase strictly")


def aggregate_daily(records, animal_id):
    """Collapse each UTC calendar day of one animal to the mean lon/lat."""
    if isinstance(records, ParseReport):
        records = records.records
    mine = [r for r in records if r.animal_id == animal_id]
    if not mine:
        raise LookupError(f"no records for id {animal_id!r}")
    groups = defaultdict(list)
    for r in mine:
        groups[r.timestamp.date()].append(r)
    keys = sorted(groups)
    first = keys[0]
    days = [(k - first).days for k in keys]
    lon = [math.fsum(r.lon for r in groups[k]) / len(groups[k]) for k in keys]
    lat = [math.fsum(r.lat for r in groups[k]) / len(groups[k]) for k in keys]
    counts = [len(groups[k]) for k in keys]
    return DailyTrack(animal_id, np.array(days), np.array(lon), np.array(lat), np.array(counts))


def to_trajectories(track):
    """(longitude, latitude) trajectories on the day-offset grid."""
    if track.days.size < 2:
        raise InsufficientDataError("need at least two distinct days")
    grid = TimeGrid(track.days.astype(float))
    return Trajectory(grid, track.lon, "lon"), Trajectory(grid, track.lat, "lat")


def write_daily_csv(path, tracks):
    if isinstance(tracks, DailyTrack):
        tracks = [tracks]
    rows = (
        (t.animal_id, int(d), float(x), float(y)) for t in tracks for d, x, y in zip(t.days, t.lon, t.lat)
    )
    write_rows(path, ["id", "day", "lon", "lat"], rows)
