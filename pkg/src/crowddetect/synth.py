"""Seeded synthetic scenario generator with known ground truth.

Incidents follow a spatial Gaussian-mixture intensity over configured
hotspots crossed with a homogeneous temporal Poisson process. Each incident
emits a Poisson number of true reports, delayed exponentially and displaced
by an isotropic Gaussian, so reports lag and drift from the incident. The
officially recorded incident time is the occurrence plus its own exponential
delay, which is what makes detection before the official report possible.
False reports arrive uniformly over region and time. Traffic pseudo-segments
dip below free-flow speed near recent incidents, and all synthetic weather
stations share one AR(1) precipitation series.

All randomness comes from a single numpy PCG64 generator seeded from the
config, so identical configs produce byte-identical datasets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (Dataset, Incident, Report, TrafficObservation,
                   WeatherObservation, build_dataset, write_dataset)
from .grid import EARTH_RADIUS_KM, BoundingBox

DEFAULT_EPOCH = 1567296000  # 2019-09-01T00:00:00Z

FREE_FLOW_KMH = 60.0
CONGESTION_RADIUS_KM = 1.0
CONGESTION_WINDOW_S = 30 * 60

# reliability distributions over scores 1..10: platform scores for genuine
# reports skew high, noise reports skew low
RELIABILITY_TRUE = (0.0, 0.01, 0.02, 0.03, 0.06, 0.08, 0.12, 0.18, 0.25, 0.25)
RELIABILITY_FALSE = (0.25, 0.25, 0.18, 0.12, 0.08, 0.06, 0.03, 0.02, 0.01, 0.0)


def default_region() -> BoundingBox:
    """A ~20 km x 20 km box anchored near 36N, constructed on the tangent
    plane so the default grid tiles it exactly."""
    lat0, lon0 = 36.0, -86.8
    dlat = math.degrees(20.0 / EARTH_RADIUS_KM)
    dlon = math.degrees(20.0 / (EARTH_RADIUS_KM * math.cos(math.radians(lat0))))
    return BoundingBox(lat0, lat0 + dlat, lon0, lon0 + dlon)


def _default_hotspots() -> tuple:
    r = default_region()

    def at(fx: float, fy: float, weight: float, sigma: float):
        return (
            r.lat_min + fy * (r.lat_max - r.lat_min),
            r.lon_min + fx * (r.lon_max - r.lon_min),
            weight,
            sigma,
        )

    return (at(0.3, 0.35, 0.45, 1.5), at(0.7, 0.6, 0.35, 2.0), at(0.5, 0.8, 0.2, 2.5))


@dataclass(frozen=True)
class Ar1Params:
    """Latent AR(1) weather driver; precipitation is the positive part."""

    phi: float = 0.9
    sigma: float = 0.8
    mean: float = -0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must be in [0, 1): {self.phi}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0: {self.sigma}")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 42
    region: BoundingBox = field(default_factory=default_region)
    duration_days: int = 120
    epoch_start: int = DEFAULT_EPOCH
    hotspots: tuple = field(default_factory=_default_hotspots)  # (lat, lon, weight, sigma_km)
    incident_rate_per_day: float = 6.0
    report_rate_mean: float = 4.0
    report_spatial_sigma_km: float = 0.5
    report_delay_mean_min: float = 5.0
    official_delay_mean_min: float = 12.0
    false_report_rate_per_day: float = 40.0
    reliability_true: tuple = RELIABILITY_TRUE
    reliability_false: tuple = RELIABILITY_FALSE
    congestion_bump: float = 0.5
    precip_process: Ar1Params = field(default_factory=Ar1Params)
    # pseudo-sensor layout (plumbing, not part of the reporting physics)
    segment_spacing_km: float = 2.0
    traffic_period_min: int = 15
    weather_period_min: int = 60
    weather_stations: int = 4

    def __post_init__(self) -> None:
        for name in ("incident_rate_per_day", "report_rate_mean", "false_report_rate_per_day",
                     "report_delay_mean_min", "official_delay_mean_min"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("report_spatial_sigma_km", "segment_spacing_km"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.duration_days < 1:
            raise ValueError("duration_days must be >= 1")
        if not 0.0 <= self.congestion_bump <= 1.0:
            raise ValueError(f"congestion_bump must be in [0, 1]: {self.congestion_bump}")
        for name in ("reliability_true", "reliability_false"):
            dist = getattr(self, name)
            if len(dist) != 10 or any(p < 0 for p in dist) or abs(sum(dist) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be 10 non-negative probabilities summing to 1")
        for h in self.hotspots:
            if len(h) != 4 or h[2] < 0 or h[3] <= 0:
                raise ValueError(f"hotspot must be (lat, lon, weight, sigma_km>0): {h}")
        if not self.hotspots:
            raise ValueError("at least one hotspot is required")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "region": [self.region.lat_min, self.region.lat_max,
                       self.region.lon_min, self.region.lon_max],
            "duration_days": self.duration_days,
            "epoch_start": self.epoch_start,
            "hotspots": [list(h) for h in self.hotspots],
            "incident_rate_per_day": self.incident_rate_per_day,
            "report_rate_mean": self.report_rate_mean,
            "report_spatial_sigma_km": self.report_spatial_sigma_km,
            "report_delay_mean_min": self.report_delay_mean_min,
            "official_delay_mean_min": self.official_delay_mean_min,
            "false_report_rate_per_day": self.false_report_rate_per_day,
            "reliability_true": list(self.reliability_true),
            "reliability_false": list(self.reliability_false),
            "congestion_bump": self.congestion_bump,
            "precip_process": [self.precip_process.phi, self.precip_process.sigma,
                               self.precip_process.mean],
            "segment_spacing_km": self.segment_spacing_km,
            "traffic_period_min": self.traffic_period_min,
            "weather_period_min": self.weather_period_min,
            "weather_stations": self.weather_stations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        kwargs = dict(d)
        if "region" in kwargs:
            kwargs["region"] = BoundingBox(*kwargs["region"])
        if "hotspots" in kwargs:
            kwargs["hotspots"] = tuple(tuple(h) for h in kwargs["hotspots"])
        for name in ("reliability_true", "reliability_false"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        if "precip_process" in kwargs:
            kwargs["precip_process"] = Ar1Params(*kwargs["precip_process"])
        return cls(**kwargs)


def _km_offsets_to_lonlat(east_km: np.ndarray, north_km: np.ndarray,
                          base_lat: np.ndarray, base_lon: np.ndarray):
    lat = base_lat + np.degrees(north_km / EARTH_RADIUS_KM)
    lon = base_lon + np.degrees(east_km / (EARTH_RADIUS_KM * np.cos(np.radians(base_lat))))
    return lat, lon


def _clamp_into(region: BoundingBox, lat: np.ndarray, lon: np.ndarray):
    pad_lat = 1e-9 * (region.lat_max - region.lat_min)
    pad_lon = 1e-9 * (region.lon_max - region.lon_min)
    return (np.clip(lat, region.lat_min + pad_lat, region.lat_max - pad_lat),
            np.clip(lon, region.lon_min + pad_lon, region.lon_max - pad_lon))


def _scatter_points(rng, region, base_lat, base_lon, sigma_km, max_tries: int = 50):
    """Gaussian displacement (km) around base points, resampled while outside
    the region, clamped after max_tries."""
    n = len(base_lat)
    lat = np.empty(n)
    lon = np.empty(n)
    todo = np.arange(n)
    for _ in range(max_tries):
        if todo.size == 0:
            break
        east = rng.normal(0.0, sigma_km[todo] if np.ndim(sigma_km) else sigma_km, size=todo.size)
        north = rng.normal(0.0, sigma_km[todo] if np.ndim(sigma_km) else sigma_km, size=todo.size)
        la, lo = _km_offsets_to_lonlat(east, north, base_lat[todo], base_lon[todo])
        lat[todo], lon[todo] = la, lo
        inside = ((la >= region.lat_min) & (la <= region.lat_max)
                  & (lo >= region.lon_min) & (lo <= region.lon_max))
        todo = todo[~inside]
    if todo.size:
        lat[todo], lon[todo] = _clamp_into(region, lat[todo], lon[todo])
    return lat, lon


def _generate(cfg: ScenarioConfig):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    region = cfg.region
    duration_s = cfg.duration_days * 86400
    end_time = cfg.epoch_start + duration_s

    # --- incidents: hotspot mixture x temporal Poisson ---
    n_inc = int(rng.poisson(cfg.incident_rate_per_day * cfg.duration_days))
    occ_times = np.sort(cfg.epoch_start + rng.integers(0, duration_s, size=n_inc))
    hs = np.array([[h[0], h[1], h[2], h[3]] for h in cfg.hotspots])
    weights = hs[:, 2] / hs[:, 2].sum()
    choice = rng.choice(len(hs), size=n_inc, p=weights)
    inc_lat, inc_lon = _scatter_points(rng, region, hs[choice, 0], hs[choice, 1], hs[choice, 3])
    official_delay = rng.exponential(cfg.official_delay_mean_min * 60.0, size=n_inc)
    official_times = occ_times + np.round(official_delay).astype(np.int64)

    incidents = [
        Incident(id=f"i{k:06d}", occurred_time=int(official_times[k]),
                 lat=float(inc_lat[k]), lon=float(inc_lon[k]))
        for k in range(n_inc)
    ]

    # --- true reports ---
    reports: list[Report] = []
    provenance: list[tuple[str, str]] = []
    rel_scores = np.arange(1, 11)
    counts = rng.poisson(cfg.report_rate_mean, size=n_inc)
    for k in range(n_inc):
        m = int(counts[k])
        if m == 0:
            continue
        delays = rng.exponential(cfg.report_delay_mean_min * 60.0, size=m)
        times = occ_times[k] + np.round(delays).astype(np.int64)
        base_lat = np.full(m, inc_lat[k])
        base_lon = np.full(m, inc_lon[k])
        lat, lon = _scatter_points(rng, region, base_lat, base_lon, cfg.report_spatial_sigma_km)
        rels = rng.choice(rel_scores, size=m, p=np.asarray(cfg.reliability_true))
        for j in range(m):
            rid = f"w{len(reports):07d}"
            reports.append(Report(id=rid, time=int(times[j]), lat=float(lat[j]),
                                  lon=float(lon[j]), reliability=int(rels[j])))
            provenance.append((rid, incidents[k].id))

    # --- false reports: uniform over region and time ---
    n_false = int(rng.poisson(cfg.false_report_rate_per_day * cfg.duration_days))
    f_times = cfg.epoch_start + rng.integers(0, duration_s, size=n_false)
    f_lat = rng.uniform(region.lat_min, region.lat_max, size=n_false)
    f_lon = rng.uniform(region.lon_min, region.lon_max, size=n_false)
    f_rels = rng.choice(rel_scores, size=n_false, p=np.asarray(cfg.reliability_false))
    for j in range(n_false):
        rid = f"w{len(reports):07d}"
        reports.append(Report(id=rid, time=int(f_times[j]), lat=float(f_lat[j]),
                              lon=float(f_lon[j]), reliability=int(f_rels[j])))
        provenance.append((rid, "FALSE"))

    # --- traffic pseudo-segments on a regular grid ---
    ew_km = EARTH_RADIUS_KM * math.cos(math.radians(region.lat_min)) * math.radians(
        region.lon_max - region.lon_min)
    ns_km = EARTH_RADIUS_KM * math.radians(region.lat_max - region.lat_min)
    n_sx = max(1, int(ew_km // cfg.segment_spacing_km))
    n_sy = max(1, int(ns_km // cfg.segment_spacing_km))
    seg_east = (np.arange(n_sx) + 0.5) * (ew_km / n_sx)
    seg_north = (np.arange(n_sy) + 0.5) * (ns_km / n_sy)
    ee, nn = np.meshgrid(seg_east, seg_north, indexing="ij")
    seg_lat = region.lat_min + np.degrees(nn.ravel() / EARTH_RADIUS_KM)
    seg_lon = region.lon_min + np.degrees(
        ee.ravel() / (EARTH_RADIUS_KM * math.cos(math.radians(region.lat_min))))

    obs_times = np.arange(cfg.epoch_start, end_time, cfg.traffic_period_min * 60, dtype=np.int64)
    traffic: list[TrafficObservation] = []
    # congestion dips when an incident occurred within the radius in the last
    # half hour; geodesic approximated on the tangent plane used to lay out
    # the segments (exact enough at city scale)
    inc_east = EARTH_RADIUS_KM * math.cos(math.radians(region.lat_min)) * np.radians(
        inc_lon - region.lon_min)
    inc_north = EARTH_RADIUS_KM * np.radians(inc_lat - region.lat_min)
    for s in range(len(seg_lat)):
        de = inc_east - ee.ravel()[s]
        dn = inc_north - nn.ravel()[s]
        near = np.flatnonzero(de * de + dn * dn <= CONGESTION_RADIUS_KM**2)
        dipped = np.zeros(len(obs_times), dtype=bool)
        for k in near:
            lo = np.searchsorted(obs_times, occ_times[k], side="left")
            hi = np.searchsorted(obs_times, occ_times[k] + CONGESTION_WINDOW_S, side="right")
            dipped[lo:hi] = True
        speeds = np.where(dipped, FREE_FLOW_KMH * (1.0 - cfg.congestion_bump), FREE_FLOW_KMH)
        sid = f"s{s:04d}"
        for t_i, t in enumerate(obs_times):
            traffic.append(TrafficObservation(
                segment_id=sid, time=int(t), speed=float(speeds[t_i]),
                reference_speed=FREE_FLOW_KMH, lat=float(seg_lat[s]), lon=float(seg_lon[s])))

    # --- weather: one shared AR(1) series observed by every station ---
    w_times = np.arange(cfg.epoch_start, end_time, cfg.weather_period_min * 60, dtype=np.int64)
    ar = cfg.precip_process
    x = ar.mean
    series = np.empty(len(w_times))
    noise = rng.normal(0.0, ar.sigma, size=len(w_times))
    for i in range(len(w_times)):
        x = ar.mean + ar.phi * (x - ar.mean) + noise[i]
        series[i] = max(0.0, x)
    n_st = max(1, int(cfg.weather_stations))
    side = max(1, int(round(math.sqrt(n_st))))
    st_lat = region.lat_min + (np.arange(side) + 0.5) / side * (region.lat_max - region.lat_min)
    st_lon = region.lon_min + (np.arange(side) + 0.5) / side * (region.lon_max - region.lon_min)
    weather: list[WeatherObservation] = []
    st = 0
    for la in st_lat:
        for lo in st_lon:
            sid = f"ws{st:02d}"
            for t_i, t in enumerate(w_times):
                weather.append(WeatherObservation(
                    station_id=sid, time=int(t), precipitation=float(series[t_i]),
                    lat=float(la), lon=float(lo)))
            st += 1

    ds = build_dataset(reports, incidents, traffic, weather, region)
    return ds, provenance


def generate(cfg: ScenarioConfig) -> Dataset:
    """Generate the scenario's dataset (fully reproducible from cfg.seed)."""
    ds, _ = _generate(cfg)
    return ds


def generate_with_provenance(cfg: ScenarioConfig):
    """Dataset plus (report_id, incident_id | "FALSE") provenance pairs."""
    return _generate(cfg)


def write_scenario(cfg: ScenarioConfig, outdir) -> dict[str, Path]:
    """Write the four dataset CSVs plus provenance.csv; returns paths."""
    outdir = Path(outdir)
    ds, provenance = _generate(cfg)
    paths = write_dataset(ds, outdir)
    prov_path = outdir / "provenance.csv"
    with prov_path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["report_id", "incident_id"])
        w.writerows(provenance)
    paths["provenance"] = prov_path
    return paths
