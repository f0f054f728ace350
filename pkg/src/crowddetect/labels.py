"""Per-cell binary labels from incident proximity, and matching of positive
detections back to ground-truth incidents for evaluation.

A cell is positive for a window ending at t if some incident lies within the
lookback/lookahead interval [t - alpha, t + beta] (inclusive) and within
``delta_km`` geodesic distance of the cell's center. Matching inverts the same
rule: a detection at time t qualifies for an incident at time s when
t - s is within [-beta, alpha] and the detection cell's center is within
``delta_km`` of the incident.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Incident
from .grid import CellIndex, GridSpec, TimeBin, cell_centers, geodesic_km

__all__ = [
    "MatchRule",
    "LabelGrid",
    "IncidentMatch",
    "label_window",
    "label_stack",
    "match_detections",
    "write_labels_csv",
    "write_matches_csv",
]


@dataclass(frozen=True)
class MatchRule:
    """Temporal lookback/lookahead (minutes) and spatial radius (km) defining
    when a window-cell counts as positive for a nearby incident."""

    alpha_min: float = 60.0
    beta_min: float = 60.0
    delta_km: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha_min < 0 or self.beta_min < 0:
            raise ValueError("alpha_min and beta_min must be >= 0")
        if self.delta_km <= 0:
            raise ValueError("delta_km must be > 0")


@dataclass(frozen=True)
class LabelGrid:
    end_bin: TimeBin
    values: np.ndarray  # (nx, ny) of {0, 1}


@dataclass(frozen=True)
class IncidentMatch:
    """An incident paired with its earliest qualifying detection."""

    incident_id: str
    detection_bin: TimeBin
    detection_cell: CellIndex
    distance_km: float
    lead_minutes: float  # positive = detected before the official report


def label_window(
    incidents: Sequence[Incident], spec: GridSpec, end_bin: TimeBin, rule: MatchRule
) -> LabelGrid:
    """Binary label grid for the window ending at ``end_bin``'s end time."""
    t_i = end_bin.end
    lo = t_i - rule.alpha_min * 60.0
    hi = t_i + rule.beta_min * 60.0
    values = np.zeros((spec.nx, spec.ny), dtype=np.int8)
    clat, clon = cell_centers(spec)
    for inc in incidents:
        if lo <= inc.occurred_time <= hi:
            dist = geodesic_km((clat, clon), (inc.lat, inc.lon))
            values |= (dist <= rule.delta_km).astype(np.int8)
    return LabelGrid(end_bin=end_bin, values=values)


def label_stack(
    incidents: Sequence[Incident],
    spec: GridSpec,
    n_bins: int,
    step_min: int,
    epoch_start: int,
    rule: MatchRule,
) -> np.ndarray:
    """Labels for all bins [0, n_bins) at once; (n_bins, nx, ny) of {0, 1}.

    Agrees with :func:`label_window` bin by bin.
    """
    step = step_min * 60
    labels = np.zeros((n_bins, spec.nx, spec.ny), dtype=np.int8)
    clat, clon = cell_centers(spec)
    a_s = int(round(rule.alpha_min * 60))
    b_s = int(round(rule.beta_min * 60))
    for inc in incidents:
        # window end times t = epoch + (b+1)*step with t in [s - beta, s + alpha]
        s = inc.occurred_time
        b_lo = -((-(s - b_s - epoch_start)) // step) - 1  # ceil division
        b_hi = (s + a_s - epoch_start) // step - 1
        b_lo, b_hi = max(0, b_lo), min(n_bins - 1, b_hi)
        if b_lo > b_hi:
            continue
        near = geodesic_km((clat, clon), (inc.lat, inc.lon)) <= rule.delta_km
        labels[b_lo : b_hi + 1] |= near.astype(np.int8)[None, :, :]
    return labels


def match_detections(
    detections: Iterable[tuple[TimeBin, Iterable[CellIndex]]],
    incidents: Sequence[Incident],
    spec: GridSpec,
    rule: MatchRule,
) -> list[IncidentMatch]:
    """Match each incident to its earliest qualifying detection.

    ``detections`` is the per-window positive cell sets, each entry carrying
    the window's end bin. Ties on detection time break by smaller distance,
    then smaller (x, y) cell index. Unmatched incidents are absent; each
    incident appears at most once. Matches are returned in incident order.
    """
    det_bins: list[TimeBin] = []
    det_cells: list[CellIndex] = []
    for end_bin, cells in detections:
        for c in cells:
            det_bins.append(end_bin)
            det_cells.append(CellIndex(*c))
    if not det_cells:
        return []
    det_t = np.array([b.end for b in det_bins], dtype=np.int64)
    order = np.argsort(det_t, kind="stable")
    det_t = det_t[order]
    cx = np.array([c.x for c in det_cells], dtype=np.int64)[order]
    cy = np.array([c.y for c in det_cells], dtype=np.int64)[order]
    clat, clon = cell_centers(spec)
    dlat, dlon = clat[cx, cy], clon[cx, cy]

    a_s = int(round(rule.alpha_min * 60))
    b_s = int(round(rule.beta_min * 60))
    matches = []
    for inc in incidents:
        lo = int(np.searchsorted(det_t, inc.occurred_time - b_s, side="left"))
        hi = int(np.searchsorted(det_t, inc.occurred_time + a_s, side="right"))
        if lo >= hi:
            continue
        dist = geodesic_km((dlat[lo:hi], dlon[lo:hi]), (inc.lat, inc.lon))
        ok = dist <= rule.delta_km
        if not ok.any():
            continue
        cand = np.flatnonzero(ok) + lo
        dist = dist[ok]
        pick = np.lexsort((cy[cand], cx[cand], dist, det_t[cand]))[0]
        best = int(order[cand[pick]])
        matches.append(
            IncidentMatch(
                incident_id=inc.id,
                detection_bin=det_bins[best],
                detection_cell=det_cells[best],
                distance_km=float(dist[pick]),
                lead_minutes=(inc.occurred_time - int(det_t[cand[pick]])) / 60.0,
            )
        )
    return matches


def write_labels_csv(grids: Iterable[LabelGrid], path) -> Path:
    """Export label grids as ``end_bin,x,y,label`` rows (for cross-checking)."""
    path = Path(path)
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["end_bin", "x", "y", "label"])
        for g in grids:
            for x in range(g.values.shape[0]):
                for y in range(g.values.shape[1]):
                    w.writerow([g.end_bin.index, x, y, int(g.values[x, y])])
    return path


def write_matches_csv(matches: Iterable[IncidentMatch], path) -> Path:
    path = Path(path)
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["incident_id", "detection_bin", "x", "y", "distance_km", "lead_minutes"])
        for m in matches:
            w.writerow(
                [m.incident_id, m.detection_bin.index, m.detection_cell.x, m.detection_cell.y,
                 f"{m.distance_km:.6f}", f"{m.lead_minutes:.3f}"]
            )
    return path
