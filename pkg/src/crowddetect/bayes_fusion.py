"""Baseline detector: naive-Bayes fusion of report reliabilities into a
per-cell incident posterior.

Each report's reliability r in [1, 10] is normalized to rho = clamp(r/10,
floor, ceiling) and treated as independent evidence; a cell's posterior odds
are prior odds times the product of rho/(1-rho). Cells without reports stay
at the prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BfConfig:
    prior: float = 0.01
    reliability_floor: float = 0.05
    reliability_ceiling: float = 0.95
    threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.prior < 1.0:
            raise ValueError(f"prior must be in (0, 1): {self.prior}")
        if not 0.0 < self.reliability_floor < self.reliability_ceiling < 1.0:
            raise ValueError(
                f"need 0 < floor < ceiling < 1, got {self.reliability_floor}, {self.reliability_ceiling}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1): {self.threshold}")


def log_odds_evidence(reliabilities: np.ndarray, cfg: BfConfig) -> np.ndarray:
    """Per-report evidence log(rho / (1 - rho)) with rho clamped."""
    rho = np.clip(np.asarray(reliabilities, dtype=np.float64) / 10.0,
                  cfg.reliability_floor, cfg.reliability_ceiling)
    return np.log(rho) - np.log1p(-rho)


def probability_from_evidence(evidence: np.ndarray, prior: float) -> np.ndarray:
    """Posterior probability from summed log-odds evidence and a prior."""
    z = math.log(prior) - math.log1p(-prior) + np.asarray(evidence, dtype=np.float64)
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bf_detect(cell_reports: Sequence[Sequence[Sequence[int]]], cfg: BfConfig) -> np.ndarray:
    """Posterior incident probability per cell from the reports observed in a
    window.

    ``cell_reports[x][y]`` is the sequence of report reliabilities (integers
    in [1, 10]) that fell in cell (x, y) during the window. Report order does
    not matter; empty cells return the prior.
    """
    nx = len(cell_reports)
    ny = len(cell_reports[0]) if nx else 0
    evidence = np.zeros((nx, ny))
    for x in range(nx):
        if len(cell_reports[x]) != ny:
            raise ValueError("ragged cell_reports: all columns must have equal length")
        for y in range(ny):
            rels = np.asarray(cell_reports[x][y], dtype=np.float64)
            if rels.size:
                if rels.min() < 1 or rels.max() > 10:
                    raise ValueError("reliabilities must lie in [1, 10]")
                evidence[x, y] = log_odds_evidence(rels, cfg).sum()
    return probability_from_evidence(evidence, cfg.prior)


def window_evidence(report_bins: np.ndarray, report_cells: tuple[np.ndarray, np.ndarray],
                    reliabilities: np.ndarray, n_bins: int, shape: tuple[int, int],
                    k: int, cfg: BfConfig) -> np.ndarray:
    """Summed log-odds evidence per (window, cell) for all windows at once.

    A window ending at bin b covers bins (b-k+1 .. b); evidence is the sum of
    the per-report log odds of every report in those bins and that cell.
    Returns an array of shape (n_bins, nx, ny).
    """
    per_bin = np.zeros((n_bins,) + shape)
    keep = report_bins < n_bins
    lo = log_odds_evidence(reliabilities[keep], cfg)
    np.add.at(per_bin, (report_bins[keep], report_cells[0][keep], report_cells[1][keep]), lo)
    csum = np.cumsum(per_bin, axis=0)
    out = csum.copy()
    out[k:] -= csum[:-k]
    return out


def calibrate(evidence: np.ndarray, labels: np.ndarray,
              prior_grid: Sequence[float], threshold_grid: Sequence[float],
              base: BfConfig) -> BfConfig:
    """Pick the (prior, threshold) pair maximizing training F1 over a fixed
    grid. Ties keep the earlier grid entry.

    A pair is equivalent to a single cut on evidence: prob >= threshold iff
    evidence >= logit(threshold) - logit(prior), so F1 is computed from
    sorted positive/negative evidence values.
    """
    ev = np.asarray(evidence).ravel()
    lab = np.asarray(labels).ravel().astype(bool)
    pos = np.sort(ev[lab])
    neg = np.sort(ev[~lab])
    n_pos = pos.size
    if n_pos == 0:
        raise ValueError("cannot calibrate with no positive labels")

    def logit(p: float) -> float:
        return math.log(p) - math.log1p(-p)

    best = None
    for prior in prior_grid:
        for thr in threshold_grid:
            cut = logit(thr) - logit(prior)
            tp = n_pos - int(np.searchsorted(pos, cut, side="left"))
            fp = neg.size - int(np.searchsorted(neg, cut, side="left"))
            fn = n_pos - tp
            p = tp / (tp + fp) if tp + fp else 0.0
            r = tp / (tp + fn) if tp + fn else 0.0
            f1 = 2 * p * r / (p + r) if p + r else 0.0
            if best is None or f1 > best[0]:
                best = (f1, prior, thr)
    _, prior, thr = best
    return BfConfig(prior=prior, reliability_floor=base.reliability_floor,
                    reliability_ceiling=base.reliability_ceiling, threshold=thr)
