"""Practitioner-facing evaluation measures: precision/recall/F1 over per-cell
decisions, plus the early-prediction aggregates computed from incident matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .labels import IncidentMatch


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    matched_incidents: int = 0
    total_incidents: int = 0


@dataclass(frozen=True)
class MetricsReport:
    """All measures for one evaluated model on one split."""

    f1: float
    precision: float
    recall: float
    early_pred_pct: float
    avg_distance_km: Optional[float]
    avg_early_time_min: Optional[float]
    counts: Counts

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "early_pred_pct": self.early_pred_pct,
            "avg_distance_km": self.avg_distance_km,
            "avg_early_time_min": self.avg_early_time_min,
            "counts": {
                "tp": self.counts.tp,
                "fp": self.counts.fp,
                "fn": self.counts.fn,
                "matched_incidents": self.counts.matched_incidents,
                "total_incidents": self.counts.total_incidents,
            },
        }


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def classification_metrics(detections: np.ndarray, labels: np.ndarray):
    """Precision, recall, F1 and counts over aligned per-cell decisions.

    ``detections`` and ``labels`` must cover the identical (window, cell)
    index set, i.e. have equal shapes. Zero denominators yield 0 by
    convention.
    """
    detections = np.asarray(detections)
    labels = np.asarray(labels)
    if detections.shape != labels.shape:
        raise ValueError(
            f"detections shape {detections.shape} does not match labels shape {labels.shape}"
        )
    det = detections.astype(bool)
    lab = labels.astype(bool)
    tp = int(np.count_nonzero(det & lab))
    fp = int(np.count_nonzero(det & ~lab))
    fn = int(np.count_nonzero(~det & lab))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return precision, recall, f1_score(precision, recall), Counts(tp=tp, fp=fp, fn=fn)


def early_metrics(matches: Sequence[IncidentMatch], total_incidents: int):
    """Early-prediction ratio and the distance/time averages over early
    matches (those with positive lead); averages are None when no match is
    early."""
    ids = [m.incident_id for m in matches]
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate incident ids in matches")
    if total_incidents < len(ids):
        raise ValueError(
            f"total_incidents ({total_incidents}) smaller than matched count ({len(ids)})"
        )
    early = [m for m in matches if m.lead_minutes > 0]
    if total_incidents == 0:
        return 0.0, None, None
    pct = 100.0 * len(early) / total_incidents
    if not early:
        return pct, None, None
    avg_dist = float(np.mean([m.distance_km for m in early]))
    avg_lead = float(np.mean([m.lead_minutes for m in early]))
    return pct, avg_dist, avg_lead


def build_report(
    detections: np.ndarray,
    labels: np.ndarray,
    matches: Sequence[IncidentMatch],
    total_incidents: int,
) -> MetricsReport:
    """Assemble the full report from decisions and incident matches."""
    precision, recall, f1, counts = classification_metrics(detections, labels)
    pct, avg_dist, avg_lead = early_metrics(matches, total_incidents)
    return MetricsReport(
        f1=f1,
        precision=precision,
        recall=recall,
        early_pred_pct=pct,
        avg_distance_km=avg_dist,
        avg_early_time_min=avg_lead,
        counts=Counts(
            tp=counts.tp,
            fp=counts.fp,
            fn=counts.fn,
            matched_incidents=len(matches),
            total_incidents=total_incidents,
        ),
    )
