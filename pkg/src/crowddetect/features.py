"""Aggregation of reports, traffic and weather into per-step feature tensors,
and stacking of consecutive frames into model input windows.

Feature channels, in order: volume (report count), sum_reliability,
mean_reliability, congestion, precipitation. Frames are dense float64 arrays
of shape (nx, ny, 5).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .grid import GridSpec, TimeBin, cell_centers, geodesic_km, locate_many

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("volume", "sum_reliability", "mean_reliability", "congestion", "precipitation")
N_FEATURES = len(FEATURE_NAMES)

TRAFFIC_STALENESS_S = 30 * 60  # observations older than this at bin end are ignored


class ConfigError(ValueError):
    """Inconsistent discretization configuration."""


@dataclass(frozen=True)
class FrameTensor:
    """Feature tensor for one time bin; shape (nx, ny, n_features)."""

    bin: TimeBin
    values: np.ndarray


@dataclass(frozen=True)
class Window:
    """The last K frames ending at ``end_bin`` (oldest first), K = T'/dt."""

    end_bin: TimeBin
    frames: tuple[FrameTensor, ...]
    feature_names: tuple[str, ...] = FEATURE_NAMES


@dataclass(frozen=True)
class FrameStore:
    """Dense stack of consecutive frames for bins [0, n_bins)."""

    spec: GridSpec
    step_min: int
    epoch_start: int
    values: np.ndarray  # (n_bins, nx, ny, n_features)

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    def bin(self, index: int) -> TimeBin:
        return TimeBin(index=index, step_min=self.step_min, epoch_start=self.epoch_start)

    def frame(self, index: int) -> FrameTensor:
        return FrameTensor(self.bin(index), self.values[index])


class FrameBuilder:
    """Precomputes per-source indexes so frames can be built quickly, one bin
    at a time or as a dense store over a bin range.

    Frame construction for distinct bins is independent; a built store is
    read-only and safe to share.
    """

    def __init__(self, ds: Dataset, spec: GridSpec, step_min: int, epoch_start: int):
        self.spec = spec
        self.step_min = int(step_min)
        self.epoch_start = int(epoch_start)
        self._index_reports(ds)
        self._index_traffic(ds)
        self._index_weather(ds)

    def _index_reports(self, ds: Dataset) -> None:
        arr = ds.report_arrays
        x, y, ok = locate_many(self.spec, arr["lat"], arr["lon"])
        in_time = arr["time"] >= self.epoch_start
        keep = ok & in_time
        dropped = int((~keep).sum())
        if dropped:
            logger.info("featurizer: %d reports outside grid coverage or before epoch", dropped)
        step_s = self.step_min * 60
        self._rep_bin = ((arr["time"][keep] - self.epoch_start) // step_s).astype(np.int64)
        self._rep_x = x[keep]
        self._rep_y = y[keep]
        self._rep_rel = arr["reliability"][keep]

    def _index_traffic(self, ds: Dataset) -> None:
        # one series per segment, ordered by time (dataset order is sorted);
        # segment cell fixed by its centroid, off-grid segments ignored
        by_seg: dict[str, list] = {}
        for obs in ds.traffic:
            by_seg.setdefault(obs.segment_id, []).append(obs)
        self._segments = []
        for seg_id in sorted(by_seg):
            rows = by_seg[seg_id]
            x, y, ok = locate_many(self.spec, np.array([rows[0].lat]), np.array([rows[0].lon]))
            if not ok[0]:
                continue
            times = np.array([r.time for r in rows], dtype=np.int64)
            cong = np.array(
                [max(0.0, (r.reference_speed - r.speed) / r.reference_speed) for r in rows],
                dtype=np.float64,
            )
            self._segments.append((int(x[0]), int(y[0]), times, cong))

    def _index_weather(self, ds: Dataset) -> None:
        by_station: dict[str, list] = {}
        for obs in ds.weather:
            by_station.setdefault(obs.station_id, []).append(obs)
        self._stations = []
        coords = []
        for st_id in sorted(by_station):
            rows = by_station[st_id]
            times = np.array([r.time for r in rows], dtype=np.int64)
            vals = np.array([r.precipitation for r in rows], dtype=np.float64)
            self._stations.append((times, vals))
            coords.append((rows[0].lat, rows[0].lon))
        if self._stations:
            clat, clon = cell_centers(self.spec)
            dists = np.stack(
                [geodesic_km((clat, clon), (la, lo)) for la, lo in coords], axis=0
            )  # (n_stations, nx, ny)
            self._nearest_station = np.argmin(dists, axis=0)
        else:
            self._nearest_station = None

    @property
    def report_bins(self) -> np.ndarray:
        """Bin index of every in-grid report (parallel to report_cells)."""
        return self._rep_bin

    @property
    def report_cells(self) -> tuple[np.ndarray, np.ndarray]:
        return self._rep_x, self._rep_y

    @property
    def report_reliabilities(self) -> np.ndarray:
        return self._rep_rel

    def _bin_ends(self, indices: np.ndarray) -> np.ndarray:
        return self.epoch_start + (indices + 1) * (self.step_min * 60)

    def _congestion(self, bin_indices: np.ndarray) -> np.ndarray:
        """Mean per-cell congestion at each bin end (LOCF with staleness cutoff)."""
        n = len(bin_indices)
        ends = self._bin_ends(bin_indices)
        csum = np.zeros((n, self.spec.nx, self.spec.ny))
        ccount = np.zeros((n, self.spec.nx, self.spec.ny))
        for x, y, times, cong in self._segments:
            idx = np.searchsorted(times, ends, side="right") - 1
            fresh = idx >= 0
            fresh[fresh] &= times[idx[fresh]] > ends[fresh] - TRAFFIC_STALENESS_S
            csum[fresh, x, y] += cong[idx[fresh]]
            ccount[fresh, x, y] += 1.0
        out = np.divide(csum, ccount, out=np.zeros_like(csum), where=ccount > 0)
        return out

    def _precipitation(self, bin_indices: np.ndarray) -> np.ndarray:
        """Nearest-station precipitation at each bin end (LOCF, 0 before data)."""
        n = len(bin_indices)
        if self._nearest_station is None:
            return np.zeros((n, self.spec.nx, self.spec.ny))
        ends = self._bin_ends(bin_indices)
        per_station = np.zeros((len(self._stations), n))
        for s, (times, vals) in enumerate(self._stations):
            idx = np.searchsorted(times, ends, side="right") - 1
            have = idx >= 0
            per_station[s, have] = vals[idx[have]]
        # (nx, ny, n) -> (n, nx, ny)
        return per_station[self._nearest_station].transpose(2, 0, 1)

    def build_store(self, n_bins: int) -> FrameStore:
        """All frames for bins [0, n_bins) as one dense array."""
        nx, ny = self.spec.nx, self.spec.ny
        values = np.zeros((n_bins, nx, ny, N_FEATURES))
        in_range = self._rep_bin < n_bins
        b, x, y = self._rep_bin[in_range], self._rep_x[in_range], self._rep_y[in_range]
        rel = self._rep_rel[in_range]
        np.add.at(values, (b, x, y, 0), 1.0)
        np.add.at(values, (b, x, y, 1), rel)
        vol = values[..., 0]
        values[..., 2] = np.divide(values[..., 1], vol, out=np.zeros_like(vol), where=vol > 0)
        bins = np.arange(n_bins, dtype=np.int64)
        values[..., 3] = self._congestion(bins)
        values[..., 4] = self._precipitation(bins)
        return FrameStore(self.spec, self.step_min, self.epoch_start, values)

    def frame(self, bin: TimeBin) -> FrameTensor:
        """Single frame for one bin."""
        if bin.step_min != self.step_min or bin.epoch_start != self.epoch_start:
            raise ValueError("bin does not match this builder's time axis")
        nx, ny = self.spec.nx, self.spec.ny
        values = np.zeros((nx, ny, N_FEATURES))
        sel = self._rep_bin == bin.index
        np.add.at(values, (self._rep_x[sel], self._rep_y[sel], 0), 1.0)
        np.add.at(values, (self._rep_x[sel], self._rep_y[sel], 1), self._rep_rel[sel])
        vol = values[..., 0]
        values[..., 2] = np.divide(values[..., 1], vol, out=np.zeros_like(vol), where=vol > 0)
        one = np.array([bin.index], dtype=np.int64)
        values[..., 3] = self._congestion(one)[0]
        values[..., 4] = self._precipitation(one)[0]
        return FrameTensor(bin, values)


def build_frame(ds: Dataset, spec: GridSpec, bin: TimeBin) -> FrameTensor:
    """Aggregate one bin of a dataset into a feature frame."""
    return FrameBuilder(ds, spec, bin.step_min, bin.epoch_start).frame(bin)


def window_length(t_prime_min: int, step_min: int) -> int:
    """Number of frames per window, K = T'/dt; T' must divide evenly."""
    if t_prime_min % step_min != 0:
        raise ConfigError(f"window period {t_prime_min} min not divisible by step {step_min} min")
    k = t_prime_min // step_min
    if k < 1:
        raise ConfigError(f"window period {t_prime_min} min shorter than step {step_min} min")
    return k


def build_window(store: FrameStore, end_bin: TimeBin, t_prime_min: int) -> Window:
    """Window of the K most recent frames ending at ``end_bin``; bins before
    the epoch are zero-filled so the stream starts immediately."""
    k = window_length(t_prime_min, store.step_min)
    if end_bin.step_min != store.step_min or end_bin.epoch_start != store.epoch_start:
        raise ValueError("end_bin does not match the store's time axis")
    if not 0 <= end_bin.index < store.n_bins:
        raise ValueError(f"end_bin {end_bin.index} outside store range [0, {store.n_bins})")
    frames = []
    zero = None
    for j in range(end_bin.index - k + 1, end_bin.index + 1):
        if j < 0:
            if zero is None:
                zero = np.zeros_like(store.values[0])
            frames.append(FrameTensor(TimeBin(0, store.step_min, store.epoch_start), zero))
        else:
            frames.append(store.frame(j))
    return Window(end_bin=end_bin, frames=tuple(frames))


def to_input(win: Window) -> np.ndarray:
    """Stack window frames along the channel axis, oldest first; channel
    order is frame-major, then feature order."""
    return np.concatenate([f.values for f in win.frames], axis=-1)


def window_inputs(store: FrameStore, end_indices: np.ndarray, k: int) -> np.ndarray:
    """Batched window assembly: (len(end_indices), nx, ny, k * n_features).

    Equivalent to stacking ``to_input(build_window(...))`` per index, with
    zero frames synthesized before bin 0.
    """
    end_indices = np.asarray(end_indices, dtype=np.int64)
    idx = end_indices[:, None] + np.arange(-k + 1, 1)[None, :]  # (B, K)
    valid = idx >= 0
    gathered = store.values[np.maximum(idx, 0)]  # (B, K, nx, ny, n_f)
    if not valid.all():
        gathered = gathered.copy()
        gathered[~valid] = 0.0
    b, _, nx, ny, nf = gathered.shape
    return gathered.transpose(0, 2, 3, 1, 4).reshape(b, nx, ny, k * nf)


def dump_window(win: Window, path) -> Path:
    """Write one window as row-major little-endian float64 with a JSON sidecar
    manifest; used for cross-implementation diffing."""
    path = Path(path)
    values = to_input(win)
    path.write_bytes(values.astype("<f8").tobytes(order="C"))
    manifest = {
        "nx": values.shape[0],
        "ny": values.shape[1],
        "channels": values.shape[2],
        "end_bin": win.end_bin.index,
        "feature_names": list(win.feature_names),
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_window_dump(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    values = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(
        manifest["nx"], manifest["ny"], manifest["channels"]
    )
    return values, manifest
