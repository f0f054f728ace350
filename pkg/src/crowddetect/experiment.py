"""Sweep orchestration: evaluate both detectors over a grid of spatial and
temporal resolutions, per monthly rotation, and maintain the epsilon-
nondominated archives.

Feature frames and labels depend only on (cell size, step), not on the
train/test split, so they are built once per grid point and shared by every
rotation. Learned-model candidates go into the archive; baseline candidates
are reported alongside. Everything is deterministic given the master seed:
per-point training seeds derive from (seed, rotation, cell-size index, step
index), never from iteration order.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bayes_fusion as bf
from . import cnn
from .data import Dataset, monthly_rotations
from .features import FrameBuilder, FrameStore, window_inputs, window_length
from .grid import CellIndex, GridSpec, TimeBin, make_grid
from .labels import MatchRule, label_stack, match_detections
from .metrics import MetricsReport, build_report
from .pareto import Candidate, ObjectiveConfig, ParetoArchive

logger = logging.getLogger(__name__)

MIN_POOL_CELLS = 4  # CNN pooling needs at least a 4x4 grid

DEFAULT_PRIOR_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 0.01, 0.03, 0.1)
DEFAULT_BF_THRESHOLD_GRID = tuple(np.round(np.arange(0.1, 0.91, 0.1), 2))


@dataclass(frozen=True)
class SweepSettings:
    """Everything a sweep needs beyond the dataset itself."""

    cell_sizes_km: tuple[float, ...]
    steps_min: tuple[int, ...]
    months: int
    epoch_start: int
    window_min: int = 30
    month_days: int = 30
    rule: MatchRule = field(default_factory=lambda: MatchRule(60.0, 60.0, 3.0))
    train: cnn.TrainConfig = field(default_factory=cnn.TrainConfig)
    filters: int = 32
    conv_activation: str = "linear"
    train_stride: int = 1
    bf_floor: float = 0.05
    bf_ceiling: float = 0.95
    prior_grid: tuple = DEFAULT_PRIOR_GRID
    bf_threshold_grid: tuple = DEFAULT_BF_THRESHOLD_GRID
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.cell_sizes_km or not self.steps_min:
            raise ValueError("cell_sizes_km and steps_min must be non-empty")
        if self.months < 2:
            raise ValueError("need at least 2 months for the rotation")
        if self.train_stride < 1:
            raise ValueError("train_stride must be >= 1")
        for step in self.steps_min:
            window_length(self.window_min, step)  # raises ConfigError on misfit


def default_epsilons(settings: SweepSettings) -> tuple[float, float, float]:
    """Per-objective epsilon defaults: 0.02 on F1 and one grid step on each
    resolution axis (smallest adjacent difference; 1.0 for singleton axes)."""

    def min_gap(values):
        vs = sorted(set(float(v) for v in values))
        if len(vs) < 2:
            return 1.0
        return min(b - a for a, b in zip(vs, vs[1:]))

    return (0.02, min_gap(settings.steps_min), min_gap(settings.cell_sizes_km))


@dataclass(frozen=True)
class SkippedPoint:
    delta_s_km: float
    delta_t_min: int
    reason: str


@dataclass
class SweepResult:
    candidates: list[Candidate]  # every (rotation, grid point, detector)
    aggregates: list[Candidate]  # one per (grid point, detector), mean over rotations
    rotation_archives: list[ParetoArchive]
    aggregate_archive: ParetoArchive
    skipped: list[SkippedPoint]

    def aggregate(self, detector: str, delta_s: float, delta_t: float) -> Optional[Candidate]:
        for c in self.aggregates:
            if (c.detector == detector and c.delta_s_km == delta_s and c.delta_t_min == delta_t):
                return c
        return None


class FrameWindowSource:
    """Window source over a frame store for the CNN trainer; windows are
    assembled batch by batch so the full input tensor never materializes."""

    def __init__(self, store: FrameStore, labels: np.ndarray, k: int, end_bins: np.ndarray):
        self._store = store
        self._labels = labels
        self._k = k
        self._end_bins = np.asarray(end_bins, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._end_bins)

    def inputs(self, idx: np.ndarray) -> np.ndarray:
        return window_inputs(self._store, self._end_bins[idx], self._k)

    def labels(self, idx: np.ndarray) -> np.ndarray:
        return self._labels[self._end_bins[idx]]


def _point_seed(master: int, rotation: int, i_ds: int, i_dt: int, salt: int = 0) -> int:
    ss = np.random.SeedSequence([int(master), int(rotation), int(i_ds), int(i_dt), int(salt)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _month_bins(settings: SweepSettings, step_min: int, month: int) -> np.ndarray:
    """Bin indices whose window END time falls inside the month (t0, t1]."""
    step = step_min * 60
    t0 = settings.epoch_start + month * settings.month_days * 86400
    t1 = t0 + settings.month_days * 86400
    b_lo = max(0, -((-(t0 - settings.epoch_start)) // step))  # ceil((t0 - epoch) / step)
    b_hi = (t1 - settings.epoch_start) // step - 1
    return np.arange(b_lo, b_hi + 1, dtype=np.int64)


def _n_bins(settings: SweepSettings, step_min: int) -> int:
    total_s = settings.months * settings.month_days * 86400
    return -((-total_s) // (step_min * 60))


def detections_by_window(det_mask: np.ndarray, bins: np.ndarray, step_min: int,
                         epoch_start: int):
    """(TimeBin, positive cells) pairs from a boolean (n, nx, ny) mask."""
    out = []
    for i, b in enumerate(bins):
        xs, ys = np.nonzero(det_mask[i])
        if xs.size:
            out.append((TimeBin(int(b), step_min, epoch_start),
                        [CellIndex(int(x), int(y)) for x, y in zip(xs, ys)]))
    return out


def evaluate_detections(det_mask: np.ndarray, labels: np.ndarray, bins: np.ndarray,
                        ds: Dataset, spec: GridSpec, settings: SweepSettings,
                        step_min: int, t0: int, t1: int) -> MetricsReport:
    """Classification plus early-prediction metrics on one test month."""
    test_incidents = [i for i in ds.incidents if t0 <= i.occurred_time < t1]
    dets = detections_by_window(det_mask, bins, step_min, settings.epoch_start)
    matches = match_detections(dets, test_incidents, spec, settings.rule)
    return build_report(det_mask, labels[bins], matches, len(test_incidents))


@dataclass
class _GridPointData:
    spec: GridSpec
    store: FrameStore
    labels: np.ndarray
    evidence: np.ndarray  # BF log-odds per (window, cell)
    k: int
    n_bins: int


def _build_grid_point(ds: Dataset, settings: SweepSettings, delta_s: float,
                      step_min: int) -> _GridPointData:
    spec = make_grid(ds.region, delta_s)
    n_bins = _n_bins(settings, step_min)
    k = window_length(settings.window_min, step_min)
    builder = FrameBuilder(ds, spec, step_min, settings.epoch_start)
    store = builder.build_store(n_bins)
    labels = label_stack(ds.incidents, spec, n_bins, step_min, settings.epoch_start,
                         settings.rule)
    base = bf.BfConfig(reliability_floor=settings.bf_floor,
                       reliability_ceiling=settings.bf_ceiling)
    evidence = bf.window_evidence(builder.report_bins, builder.report_cells,
                                  builder.report_reliabilities, n_bins,
                                  (spec.nx, spec.ny), k, base)
    return _GridPointData(spec=spec, store=store, labels=labels, evidence=evidence,
                          k=k, n_bins=n_bins)


def _train_or_load_cnn(point: _GridPointData, train_bins: np.ndarray,
                       settings: SweepSettings, seed: int, model_path: Path,
                       overwrite: bool) -> cnn.TrainedModel:
    if model_path.exists() and not overwrite:
        logger.info("reusing existing model %s", model_path)
        return cnn.load_model(model_path)
    spec = cnn.CnnSpec(point.spec.nx, point.spec.ny, point.k * point.store.values.shape[-1],
                       filters=settings.filters, conv_activation=settings.conv_activation)
    source = FrameWindowSource(point.store, point.labels, point.k,
                               train_bins[:: settings.train_stride])
    cfg = replace(settings.train, seed=seed)
    model = cnn.train(source, spec, cfg)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    cnn.save_model(model, model_path)
    return model


def run_sweep(ds: Dataset, settings: SweepSettings, outdir, overwrite: bool = False) -> SweepResult:
    """Evaluate the full (cell size x step x detector) grid over all monthly
    rotations; writes per-rotation and aggregate candidates/archives under
    ``outdir`` and returns them."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rotations = monthly_rotations(ds, settings.epoch_start, settings.months,
                                  settings.month_days)
    candidates: list[Candidate] = []
    skipped: list[SkippedPoint] = []

    for i_ds, delta_s in enumerate(settings.cell_sizes_km):
        for i_dt, step_min in enumerate(settings.steps_min):
            point = _build_grid_point(ds, settings, delta_s, step_min)
            cnn_ok = point.spec.nx >= MIN_POOL_CELLS and point.spec.ny >= MIN_POOL_CELLS
            if not cnn_ok:
                reason = (f"grid {point.spec.nx}x{point.spec.ny} too small for CNN pooling "
                          f"(needs >= {MIN_POOL_CELLS} cells per side)")
                skipped.append(SkippedPoint(delta_s, step_min, reason))
                logger.warning("skipping CNN at ds=%s dt=%s: %s", delta_s, step_min, reason)

            for rot in rotations:
                test_bins = _month_bins(settings, step_min, rot.index)
                train_bins = np.setdiff1d(np.arange(point.n_bins), test_bins)
                t0, t1 = rot.test_start, rot.test_end

                if cnn_ok:
                    model_path = outdir / "models" / (
                        f"cnn_ds{delta_s:g}_dt{step_min}_rot{rot.index}.model")
                    seed = _point_seed(settings.seed, rot.index, i_ds, i_dt)
                    model = _train_or_load_cnn(point, train_bins, settings, seed,
                                               model_path, overwrite)
                    probs = _predict_windows(model, point, test_bins)
                    det = probs >= model.threshold
                    report = evaluate_detections(det, point.labels, test_bins, ds,
                                                 point.spec, settings, step_min, t0, t1)
                    candidates.append(Candidate(
                        detector="cnn", delta_s_km=delta_s, delta_t_min=step_min,
                        f1=report.f1, metrics=report,
                        model_ref=str(model_path.relative_to(outdir)),
                        rotation=rot.index))

                bf_cfg = bf.calibrate(
                    point.evidence[train_bins], point.labels[train_bins],
                    settings.prior_grid, settings.bf_threshold_grid,
                    bf.BfConfig(reliability_floor=settings.bf_floor,
                                reliability_ceiling=settings.bf_ceiling))
                bf_probs = bf.probability_from_evidence(point.evidence[test_bins], bf_cfg.prior)
                bf_det = bf_probs >= bf_cfg.threshold
                report = evaluate_detections(bf_det, point.labels, test_bins, ds,
                                             point.spec, settings, step_min, t0, t1)
                candidates.append(Candidate(
                    detector="bf", delta_s_km=delta_s, delta_t_min=step_min,
                    f1=report.f1, metrics=report, model_ref=None, rotation=rot.index))
            # free the per-point tensors before the next grid point
            del point

    rotation_archives = []
    for rot in rotations:
        archive = ParetoArchive(settings.objectives)
        for c in _canonical(candidates):
            if c.rotation == rot.index and c.detector == "cnn":
                archive.insert(c)
        rotation_archives.append(archive)

    aggregates = _aggregate_candidates(candidates, settings)
    aggregate_archive = ParetoArchive(settings.objectives)
    for c in _canonical(aggregates):
        if c.detector == "cnn":
            aggregate_archive.insert(c)

    _write_outputs(outdir, settings, candidates, aggregates, rotation_archives,
                   aggregate_archive, skipped)
    return SweepResult(candidates=candidates, aggregates=aggregates,
                       rotation_archives=rotation_archives,
                       aggregate_archive=aggregate_archive, skipped=skipped)


def _predict_windows(model: cnn.TrainedModel, point: _GridPointData,
                     bins: np.ndarray) -> np.ndarray:
    out = np.empty((len(bins), point.spec.nx, point.spec.ny))
    for start in range(0, len(bins), cnn.PREDICT_BATCH):
        sel = bins[start : start + cnn.PREDICT_BATCH]
        x = window_inputs(point.store, sel, point.k)
        out[start : start + len(sel)] = cnn.forward_batch(model.spec, model.weights, x)
    return out


def _canonical(cands: Sequence[Candidate]) -> list[Candidate]:
    """Archive insertion order: by (cell size, step, rotation); makes the
    within-box tie-break reproducible regardless of evaluation order."""
    return sorted(cands, key=lambda c: (c.delta_s_km, c.delta_t_min, c.rotation or 0))


def _mean_opt(values):
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _aggregate_candidates(candidates: Sequence[Candidate],
                          settings: SweepSettings) -> list[Candidate]:
    """Mean metrics over rotations per (detector, cell size, step)."""
    out = []
    keys = []
    for c in candidates:
        k = (c.detector, c.delta_s_km, c.delta_t_min)
        if k not in keys:
            keys.append(k)
    for detector, delta_s, step_min in keys:
        group = [c for c in candidates
                 if (c.detector, c.delta_s_km, c.delta_t_min) == (detector, delta_s, step_min)]
        reports = [c.metrics for c in group]
        from .metrics import Counts
        agg = MetricsReport(
            f1=float(np.mean([r.f1 for r in reports])),
            precision=float(np.mean([r.precision for r in reports])),
            recall=float(np.mean([r.recall for r in reports])),
            early_pred_pct=float(np.mean([r.early_pred_pct for r in reports])),
            avg_distance_km=_mean_opt([r.avg_distance_km for r in reports]),
            avg_early_time_min=_mean_opt([r.avg_early_time_min for r in reports]),
            counts=Counts(
                tp=sum(r.counts.tp for r in reports),
                fp=sum(r.counts.fp for r in reports),
                fn=sum(r.counts.fn for r in reports),
                matched_incidents=sum(r.counts.matched_incidents for r in reports),
                total_incidents=sum(r.counts.total_incidents for r in reports),
            ),
        )
        out.append(Candidate(detector=detector, delta_s_km=delta_s, delta_t_min=step_min,
                             f1=agg.f1, metrics=agg, model_ref=None, rotation=None))
    return out


CANDIDATE_COLUMNS = ["detector", "delta_s_km", "delta_t_min", "f1", "precision", "recall",
                     "early_pred_pct", "avg_distance_km", "avg_early_time_min", "in_archive"]


def candidate_key(c: Candidate) -> tuple:
    return (c.detector, float(c.delta_s_km), float(c.delta_t_min), c.rotation)


def write_candidates_csv(candidates: Sequence[Candidate], archive: ParetoArchive, path) -> Path:
    path = Path(path)
    in_archive = {candidate_key(c) for c in archive.members()}
    with path.open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANDIDATE_COLUMNS)
        for c in candidates:
            m = c.metrics
            w.writerow([
                c.detector, repr(float(c.delta_s_km)), repr(float(c.delta_t_min)),
                repr(m.f1), repr(m.precision), repr(m.recall), repr(m.early_pred_pct),
                "" if m.avg_distance_km is None else repr(m.avg_distance_km),
                "" if m.avg_early_time_min is None else repr(m.avg_early_time_min),
                int(candidate_key(c) in in_archive),
            ])
    return path


def _write_outputs(outdir: Path, settings: SweepSettings, candidates, aggregates,
                   rotation_archives, aggregate_archive, skipped) -> None:
    for archive, rot_index in zip(rotation_archives, range(len(rotation_archives))):
        rot_dir = outdir / "rotations" / f"rot{rot_index}"
        rot_dir.mkdir(parents=True, exist_ok=True)
        rot_cands = [c for c in candidates if c.rotation == rot_index]
        write_candidates_csv(rot_cands, archive, rot_dir / "candidates.csv")
        archive.write_json(rot_dir / "pareto.json")
    write_candidates_csv(aggregates, aggregate_archive, outdir / "candidates.csv")
    aggregate_archive.write_json(outdir / "pareto.json")
    summary = {
        "skipped": [{"delta_s_km": s.delta_s_km, "delta_t_min": s.delta_t_min,
                     "reason": s.reason} for s in skipped],
        "n_candidates": len(candidates),
        "n_rotations": len(rotation_archives),
    }
    (outdir / "sweep_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
