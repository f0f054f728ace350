"""Canonical domain records, CSV ingestion/validation, and deterministic
de-duplication for the four data sources (reports, incidents, traffic, weather).

Timestamps are stored as integer seconds since the Unix epoch (UTC); files
carry ISO-8601 UTC strings. All loaded sequences are sorted ascending by time
with a stable sort, so equal timestamps preserve file order.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path

import numpy as np

from .grid import BoundingBox

logger = logging.getLogger(__name__)

REPORT_HEADER = ["id", "time", "lat", "lon", "reliability"]
INCIDENT_HEADER = ["id", "time", "lat", "lon"]
TRAFFIC_HEADER = ["segment_id", "time", "speed", "reference_speed", "lat", "lon"]
WEATHER_HEADER = ["station_id", "time", "precipitation", "lat", "lon"]


class FormatError(ValueError):
    """A file row failed validation; message names file, line and field."""


def parse_time(value: str) -> int:
    """ISO-8601 UTC (e.g. ``2019-09-01T14:03:00Z``) to integer epoch seconds."""
    dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_time(t: int) -> str:
    return datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _check_lat(lat: float) -> float:
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"lat out of range [-90, 90]: {lat}")
    return lat


def _check_lon(lon: float) -> float:
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"lon out of range [-180, 180]: {lon}")
    return lon


@dataclass(frozen=True)
class Report:
    """One crowdsourced alert: time, location, and platform reliability."""

    id: str
    time: int
    lat: float
    lon: float
    reliability: int

    def __post_init__(self) -> None:
        _check_lat(self.lat)
        _check_lon(self.lon)
        if not (isinstance(self.reliability, int) and 1 <= self.reliability <= 10):
            raise ValueError(f"reliability must be an integer in [1, 10]: {self.reliability}")


@dataclass(frozen=True)
class Incident:
    """Ground-truth event; its officially reported time proxies occurrence."""

    id: str
    occurred_time: int
    lat: float
    lon: float

    def __post_init__(self) -> None:
        _check_lat(self.lat)
        _check_lon(self.lon)


@dataclass(frozen=True)
class TrafficObservation:
    segment_id: str
    time: int
    speed: float
    reference_speed: float
    lat: float
    lon: float

    def __post_init__(self) -> None:
        _check_lat(self.lat)
        _check_lon(self.lon)
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0: {self.speed}")
        if self.reference_speed <= 0:
            raise ValueError(f"reference_speed must be > 0: {self.reference_speed}")


@dataclass(frozen=True)
class WeatherObservation:
    station_id: str
    time: int
    precipitation: float
    lat: float
    lon: float

    def __post_init__(self) -> None:
        _check_lat(self.lat)
        _check_lon(self.lon)
        if self.precipitation < 0:
            raise ValueError(f"precipitation must be >= 0: {self.precipitation}")


@dataclass(frozen=True)
class Dataset:
    """Validated, time-sorted, de-duplicated records plus the region they
    fall in. Immutable after load; safe to share across threads."""

    reports: tuple[Report, ...]
    incidents: tuple[Incident, ...]
    traffic: tuple[TrafficObservation, ...]
    weather: tuple[WeatherObservation, ...]
    region: BoundingBox

    @cached_property
    def report_arrays(self) -> dict[str, np.ndarray]:
        """Columnar view of reports (time, lat, lon, reliability)."""
        return {
            "time": np.array([r.time for r in self.reports], dtype=np.int64),
            "lat": np.array([r.lat for r in self.reports], dtype=np.float64),
            "lon": np.array([r.lon for r in self.reports], dtype=np.float64),
            "reliability": np.array([r.reliability for r in self.reports], dtype=np.float64),
        }

    @cached_property
    def incident_arrays(self) -> dict[str, np.ndarray]:
        return {
            "time": np.array([i.occurred_time for i in self.incidents], dtype=np.int64),
            "lat": np.array([i.lat for i in self.incidents], dtype=np.float64),
            "lon": np.array([i.lon for i in self.incidents], dtype=np.float64),
        }


def _dedup_by_id(records):
    """Keep the first record per id from a time-sorted sequence (earliest
    wins; equal times keep file order because the sort is stable)."""
    seen = set()
    out = []
    for r in records:
        if r.id not in seen:
            seen.add(r.id)
            out.append(r)
    return out


def _dedup_by_key(records, key):
    seen = set()
    out = []
    for r in records:
        k = key(r)
        if k not in seen:
            seen.add(k)
            out.append(r)
    return out


def _load_csv(path, header, builder, region, time_field="time"):
    """Parse one CSV source; returns (in-region records, dropped count).

    Malformed rows raise :class:`FormatError` naming file, line and field;
    records with valid coordinates outside ``region`` are dropped and counted.
    """
    path = Path(path)
    records = []
    dropped = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got_header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header {','.join(header)}") from None
        if [h.strip() for h in got_header] != header:
            raise FormatError(f"{path}, line 1: expected header {','.join(header)}, got {','.join(got_header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}, line {lineno}: expected {len(header)} fields, got {len(row)}")
            values = dict(zip(header, (v.strip() for v in row)))
            try:
                record = builder(values)
            except (ValueError, KeyError) as exc:
                bad_field = _blame_field(values, header, time_field)
                raise FormatError(f"{path}, line {lineno}, field '{bad_field}': {exc}") from exc
            if not region.contains(record.lat, record.lon):
                dropped += 1
                continue
            records.append(record)
    return records, dropped


def _blame_field(values, header, time_field):
    """Best-effort name of the offending field for an error message."""
    for name in header:
        raw = values.get(name, "")
        if name == time_field:
            try:
                parse_time(raw)
            except ValueError:
                return name
        elif name in ("lat", "lon", "speed", "reference_speed", "precipitation"):
            try:
                v = float(raw)
            except ValueError:
                return name
            if name == "lat" and not -90 <= v <= 90:
                return name
            if name == "lon" and not -180 <= v <= 180:
                return name
            if name in ("speed", "precipitation") and v < 0:
                return name
            if name == "reference_speed" and v <= 0:
                return name
        elif name == "reliability":
            try:
                v = int(raw)
            except ValueError:
                return name
            if not 1 <= v <= 10:
                return name
    return "row"


def _build_report(v):
    return Report(v["id"], parse_time(v["time"]), float(v["lat"]), float(v["lon"]), int(v["reliability"]))


def _build_incident(v):
    return Incident(v["id"], parse_time(v["time"]), float(v["lat"]), float(v["lon"]))


def _build_traffic(v):
    return TrafficObservation(
        v["segment_id"], parse_time(v["time"]), float(v["speed"]),
        float(v["reference_speed"]), float(v["lat"]), float(v["lon"]),
    )


def _build_weather(v):
    return WeatherObservation(
        v["station_id"], parse_time(v["time"]), float(v["precipitation"]), float(v["lat"]), float(v["lon"]),
    )


def _sorted_by_time(records, key):
    return sorted(records, key=key)  # python sort is stable


def build_dataset(reports, incidents, traffic, weather, region) -> Dataset:
    """Sort, de-duplicate and assemble validated records into a Dataset.

    Reports and incidents de-duplicate by id (earliest record wins); traffic
    and weather by (source id, time), first occurrence wins.
    """
    reports = _dedup_by_id(_sorted_by_time(reports, lambda r: r.time))
    incidents = _dedup_by_id(_sorted_by_time(incidents, lambda r: r.occurred_time))
    traffic = _dedup_by_key(_sorted_by_time(traffic, lambda r: r.time), lambda r: (r.segment_id, r.time))
    weather = _dedup_by_key(_sorted_by_time(weather, lambda r: r.time), lambda r: (r.station_id, r.time))
    return Dataset(tuple(reports), tuple(incidents), tuple(traffic), tuple(weather), region)


def load_dataset(
    region: BoundingBox,
    reports_path=None,
    incidents_path=None,
    traffic_path=None,
    weather_path=None,
) -> Dataset:
    """Load, validate, sort and de-duplicate the four CSV sources.

    Any path may be None (that source is empty). Malformed rows raise
    :class:`FormatError`; records outside ``region`` are dropped with a
    logged count per source.
    """
    reports, incidents, traffic, weather = [], [], [], []
    for name, path, header, builder, sink in (
        ("reports", reports_path, REPORT_HEADER, _build_report, reports),
        ("incidents", incidents_path, INCIDENT_HEADER, _build_incident, incidents),
        ("traffic", traffic_path, TRAFFIC_HEADER, _build_traffic, traffic),
        ("weather", weather_path, WEATHER_HEADER, _build_weather, weather),
    ):
        if path is None:
            continue
        records, dropped = _load_csv(path, header, builder, region)
        if dropped:
            logger.info("%s: dropped %d out-of-region records from %s", name, dropped, path)
        sink.extend(records)
    return build_dataset(reports, incidents, traffic, weather, region)


def write_dataset(ds: Dataset, outdir) -> dict[str, Path]:
    """Write a dataset back out in the canonical CSV formats (UTF-8, LF)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    def _write(name, header, rows):
        p = outdir / f"{name}.csv"
        with p.open("w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths[name] = p

    _write("reports", REPORT_HEADER,
           ((r.id, format_time(r.time), repr(r.lat), repr(r.lon), r.reliability) for r in ds.reports))
    _write("incidents", INCIDENT_HEADER,
           ((i.id, format_time(i.occurred_time), repr(i.lat), repr(i.lon)) for i in ds.incidents))
    _write("traffic", TRAFFIC_HEADER,
           ((t.segment_id, format_time(t.time), repr(t.speed), repr(t.reference_speed), repr(t.lat), repr(t.lon))
            for t in ds.traffic))
    _write("weather", WEATHER_HEADER,
           ((w_.station_id, format_time(w_.time), repr(w_.precipitation), repr(w_.lat), repr(w_.lon))
            for w_ in ds.weather))
    return paths


def filter_time(ds: Dataset, start: int, end: int) -> Dataset:
    """Records with time in [start, end); sorting is preserved."""
    if start >= end:
        raise ValueError(f"start ({start}) must be < end ({end})")
    return Dataset(
        tuple(r for r in ds.reports if start <= r.time < end),
        tuple(i for i in ds.incidents if start <= i.occurred_time < end),
        tuple(t for t in ds.traffic if start <= t.time < end),
        tuple(w for w in ds.weather if start <= w.time < end),
        ds.region,
    )


def _concat(ds_a: Dataset, ds_b: Dataset) -> Dataset:
    """Concatenate two time-disjoint or ordered slices; re-sorts stably."""
    return Dataset(
        tuple(_sorted_by_time(ds_a.reports + ds_b.reports, lambda r: r.time)),
        tuple(_sorted_by_time(ds_a.incidents + ds_b.incidents, lambda r: r.occurred_time)),
        tuple(_sorted_by_time(ds_a.traffic + ds_b.traffic, lambda r: r.time)),
        tuple(_sorted_by_time(ds_a.weather + ds_b.weather, lambda r: r.time)),
        ds_a.region,
    )


@dataclass(frozen=True)
class Rotation:
    """One train/test split of a monthly rotation."""

    index: int
    train: Dataset
    test: Dataset
    test_start: int
    test_end: int


def monthly_rotations(ds: Dataset, epoch_start: int, months: int, month_days: int = 30) -> list[Rotation]:
    """Split into ``months`` consecutive blocks of ``month_days`` days; each
    rotation holds one block out as the test set and trains on the rest."""
    if months < 2:
        raise ValueError("need at least 2 months to rotate")
    month_s = month_days * 86400
    rotations = []
    for m in range(months):
        t0 = epoch_start + m * month_s
        t1 = epoch_start + (m + 1) * month_s
        test = filter_time(ds, t0, t1)
        before = filter_time(ds, epoch_start, t0) if m > 0 else None
        after = filter_time(ds, t1, epoch_start + months * month_s) if m < months - 1 else None
        if before is None:
            train = after
        elif after is None:
            train = before
        else:
            train = _concat(before, after)
        rotations.append(Rotation(index=m, train=train, test=test, test_start=t0, test_end=t1))
    return rotations
