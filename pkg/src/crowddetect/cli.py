"""Command-line orchestration: configuration, one subcommand per pipeline
stage, run manifests, and plot-data emission.

Subcommands: simulate, featurize, train, eval, sweep, report. Configuration
is a nested JSON document; command-line flags override the file, which
overrides built-in defaults. Every run directory gets a manifest.json with
the fully resolved configuration and seeds: equal manifests produce equal
outputs. Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from . import cnn
from . import synth
from .data import Dataset, load_dataset, monthly_rotations, parse_time
from .experiment import (SweepSettings, default_epsilons, run_sweep,
                         write_candidates_csv)
from .features import build_window, dump_window, window_length, FrameBuilder
from .grid import BoundingBox, make_grid
from .labels import MatchRule
from .pareto import ObjectiveConfig, ParetoArchive

logger = logging.getLogger(__name__)


class UserError(Exception):
    """Invalid input or configuration; reported without a traceback."""


DEFAULT_CONFIG = {
    "seed": 42,
    "data": {
        "mode": "synth",
        "synth": synth.ScenarioConfig().to_dict(),
        "files": None,  # {"reports": ..., "incidents": ..., "traffic": ..., "weather": ...,
                        #  "region": [lat_min, lat_max, lon_min, lon_max], "epoch": "ISO"}
    },
    "grid": {"cell_sizes_km": [1.0, 3.0, 5.0]},
    "time": {"steps_min": [5, 20, 30], "window_min": 30, "months": 4, "month_days": 30},
    "labels": {"alpha_min": 60.0, "beta_min": 60.0, "delta_km": 3.0},
    "cnn": {
        "filters": 32,
        "conv_activation": "linear",
        "epochs": 3,
        "batch_size": 64,
        "learning_rate": 0.01,
        "pos_weight": None,
        "threshold_grid": [float(t) for t in cnn.DEFAULT_THRESHOLD_GRID],
        "folds": 3,
        "train_stride": 2,
    },
    "bf": {
        "reliability_floor": 0.05,
        "reliability_ceiling": 0.95,
        "prior_grid": [1e-4, 3e-4, 1e-3, 3e-3, 0.01, 0.03, 0.1],
        "threshold_grid": [round(0.1 * i, 1) for i in range(1, 10)],
    },
    "objectives": {"gammas": [1.0, 1.0, 1.0], "z1": "identity", "z2": "identity",
                   "epsilons": None},  # None -> 0.02 on F1 and one grid step per axis
    "output": {"dir": "runs/default"},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> dict:
    cfg = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UserError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UserError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UserError(f"config file {p} must contain a JSON object")
        cfg = _deep_merge(cfg, user)
    if seed is not None:
        cfg = _deep_merge(cfg, {"seed": seed})
    if out is not None:
        cfg = _deep_merge(cfg, {"output": {"dir": out}})
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise UserError(f"config section '{name}' is missing or not an object")
    return sec


def _scenario(cfg: dict) -> synth.ScenarioConfig:
    data = _section(cfg, "data")
    try:
        sc = synth.ScenarioConfig.from_dict(data["synth"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"config section 'data.synth': {exc}") from exc
    time_sec = _section(cfg, "time")
    expected = int(time_sec["months"]) * int(time_sec["month_days"])
    if sc.duration_days != expected:
        raise UserError(
            f"config section 'data.synth': duration_days ({sc.duration_days}) must equal "
            f"time.months * time.month_days ({expected})")
    return sc


def _load_data(cfg: dict, outdir: Path) -> tuple[Dataset, int]:
    """Dataset plus the epoch timestamp. Synthetic data is loaded from the
    run's data/ directory when present (a prior `simulate`), else generated
    in memory; both paths yield identical datasets."""
    data = _section(cfg, "data")
    mode = data.get("mode")
    if mode == "synth":
        sc = _scenario(cfg)
        ddir = outdir / "data"
        if (ddir / "reports.csv").exists():
            logger.info("loading synthetic data from %s", ddir)
            ds = load_dataset(sc.region,
                              reports_path=ddir / "reports.csv",
                              incidents_path=ddir / "incidents.csv",
                              traffic_path=ddir / "traffic.csv",
                              weather_path=ddir / "weather.csv")
        else:
            logger.info("generating synthetic data in memory (seed %d)", sc.seed)
            ds = synth.generate(sc)
        return ds, sc.epoch_start
    if mode == "files":
        files = data.get("files")
        if not isinstance(files, dict):
            raise UserError("config section 'data.files' is required when data.mode = 'files'")
        try:
            region = BoundingBox(*files["region"])
            epoch = parse_time(files["epoch"])
        except (KeyError, TypeError, ValueError) as exc:
            raise UserError(f"config section 'data.files': {exc}") from exc
        for key in ("reports", "incidents", "traffic", "weather"):
            if key in files and files[key] is not None and not Path(files[key]).exists():
                raise UserError(f"data file not found: {files[key]}")
        ds = load_dataset(region,
                          reports_path=files.get("reports"),
                          incidents_path=files.get("incidents"),
                          traffic_path=files.get("traffic"),
                          weather_path=files.get("weather"))
        return ds, epoch
    raise UserError(f"config section 'data': mode must be 'synth' or 'files', got {mode!r}")


def _settings(cfg: dict, epoch_start: int, paper_arch: bool = False) -> SweepSettings:
    grid_sec = _section(cfg, "grid")
    time_sec = _section(cfg, "time")
    labels_sec = _section(cfg, "labels")
    cnn_sec = _section(cfg, "cnn")
    bf_sec = _section(cfg, "bf")
    obj_sec = _section(cfg, "objectives")
    try:
        rule = MatchRule(float(labels_sec["alpha_min"]), float(labels_sec["beta_min"]),
                         float(labels_sec["delta_km"]))
    except (KeyError, ValueError) as exc:
        raise UserError(f"config section 'labels': {exc}") from exc
    try:
        train = cnn.TrainConfig(
            epochs=int(cnn_sec["epochs"]), batch_size=int(cnn_sec["batch_size"]),
            learning_rate=float(cnn_sec["learning_rate"]),
            pos_weight=None if cnn_sec.get("pos_weight") is None else float(cnn_sec["pos_weight"]),
            threshold_grid=tuple(cnn_sec["threshold_grid"]),
            folds=int(cnn_sec["folds"]), seed=int(cfg["seed"]))
    except (KeyError, ValueError) as exc:
        raise UserError(f"config section 'cnn': {exc}") from exc
    try:
        settings = SweepSettings(
            cell_sizes_km=tuple(float(v) for v in grid_sec["cell_sizes_km"]),
            steps_min=tuple(int(v) for v in time_sec["steps_min"]),
            months=int(time_sec["months"]),
            month_days=int(time_sec["month_days"]),
            epoch_start=epoch_start,
            window_min=int(time_sec["window_min"]),
            rule=rule,
            train=train,
            filters=256 if paper_arch else int(cnn_sec["filters"]),
            conv_activation=cnn_sec.get("conv_activation", "linear"),
            train_stride=int(cnn_sec.get("train_stride", 1)),
            bf_floor=float(bf_sec["reliability_floor"]),
            bf_ceiling=float(bf_sec["reliability_ceiling"]),
            prior_grid=tuple(bf_sec["prior_grid"]),
            bf_threshold_grid=tuple(bf_sec["threshold_grid"]),
            objectives=ObjectiveConfig(gammas=(1.0, 1.0, 1.0)),  # placeholder, set below
            seed=int(cfg["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise UserError(f"config section 'grid'/'time': {exc}") from exc
    try:
        eps = obj_sec.get("epsilons")
        objectives = ObjectiveConfig(
            gammas=tuple(float(g) for g in obj_sec["gammas"]),
            z1=obj_sec["z1"], z2=obj_sec["z2"],
            epsilons=tuple(float(e) for e in eps) if eps else default_epsilons(settings))
    except (KeyError, ValueError) as exc:
        raise UserError(f"config section 'objectives': {exc}") from exc
    return SweepSettings(**{**settings.__dict__, "objectives": objectives})


def _write_manifest(outdir: Path, cfg: dict, command: str) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "crowddetect", "version": __version__, "command": command,
                "config": cfg}
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, overwrite: bool) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    sc = _scenario(cfg)
    ddir = outdir / "data"
    if (ddir / "reports.csv").exists() and not overwrite:
        print(f"data already present in {ddir} (use --overwrite to regenerate)")
        return 0
    paths = synth.write_scenario(sc, ddir)
    _write_manifest(outdir, cfg, "simulate")
    ds = load_dataset(sc.region, reports_path=paths["reports"],
                      incidents_path=paths["incidents"])
    print(f"wrote {len(ds.reports)} reports, {len(ds.incidents)} incidents to {ddir}")
    return 0


def cmd_featurize(cfg: dict, cell_size: float, step_min: int, start_bin: int,
                  count: int) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    ds, epoch = _load_data(cfg, outdir)
    time_sec = _section(cfg, "time")
    spec = make_grid(ds.region, cell_size)
    k = window_length(int(time_sec["window_min"]), step_min)
    n_bins = start_bin + count
    builder = FrameBuilder(ds, spec, step_min, epoch)
    store = builder.build_store(n_bins)
    wdir = outdir / "windows" / f"ds{cell_size:g}_dt{step_min}"
    wdir.mkdir(parents=True, exist_ok=True)
    for b in range(start_bin, start_bin + count):
        win = build_window(store, store.bin(b), int(time_sec["window_min"]))
        dump_window(win, wdir / f"window_{b:06d}.bin")
    _write_manifest(outdir, cfg, "featurize")
    print(f"wrote {count} window dumps ({spec.nx}x{spec.ny}x{k * 5}) to {wdir}")
    return 0


def cmd_sweep(cfg: dict, overwrite: bool, paper_arch: bool) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    ds, epoch = _load_data(cfg, outdir)
    settings = _settings(cfg, epoch, paper_arch)
    _write_manifest(outdir, cfg, "sweep")
    result = run_sweep(ds, settings, outdir, overwrite=overwrite)
    print(f"sweep complete: {len(result.candidates)} candidates, "
          f"{len(result.aggregate_archive)} archive members, "
          f"{len(result.skipped)} grid points skipped")
    for s in result.skipped:
        print(f"  skipped ds={s.delta_s_km} dt={s.delta_t_min}: {s.reason}")
    print(f"outputs in {outdir}")
    return 0


def cmd_train(cfg: dict, cell_size: float, step_min: int, rotation: int,
              overwrite: bool, paper_arch: bool) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    ds, epoch = _load_data(cfg, outdir)
    base = _settings(cfg, epoch, paper_arch)
    settings = SweepSettings(**{**base.__dict__,
                                "cell_sizes_km": (cell_size,), "steps_min": (step_min,)})
    from .experiment import _build_grid_point, _month_bins, _point_seed, _train_or_load_cnn

    point = _build_grid_point(ds, settings, cell_size, step_min)
    if point.spec.nx < 4 or point.spec.ny < 4:
        raise UserError(f"grid {point.spec.nx}x{point.spec.ny} too small for CNN pooling")
    test_bins = _month_bins(settings, step_min, rotation)
    train_bins = np.setdiff1d(np.arange(point.n_bins), test_bins)
    model_path = outdir / "models" / f"cnn_ds{cell_size:g}_dt{step_min}_rot{rotation}.model"
    if model_path.exists() and not overwrite:
        raise UserError(f"model already exists: {model_path} (use --overwrite)")
    seed = _point_seed(settings.seed, rotation, 0, 0)
    model = _train_or_load_cnn(point, train_bins, settings, seed, model_path, overwrite=True)
    _write_manifest(outdir, cfg, "train")
    print(f"trained model -> {model_path} (threshold {model.threshold:g}, "
          f"epochs {model.train_manifest.get('chosen_epochs')})")
    return 0


def cmd_eval(cfg: dict, detector: str, model_path: str | None, cell_size: float,
             step_min: int, rotation: int) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    ds, epoch = _load_data(cfg, outdir)
    base = _settings(cfg, epoch)
    settings = SweepSettings(**{**base.__dict__,
                                "cell_sizes_km": (cell_size,), "steps_min": (step_min,)})
    from . import bayes_fusion as bf
    from .experiment import (_build_grid_point, _month_bins, _predict_windows,
                             evaluate_detections)

    point = _build_grid_point(ds, settings, cell_size, step_min)
    test_bins = _month_bins(settings, step_min, rotation)
    train_bins = np.setdiff1d(np.arange(point.n_bins), test_bins)
    t0 = epoch + rotation * settings.month_days * 86400
    t1 = t0 + settings.month_days * 86400
    if detector == "cnn":
        if model_path is None:
            raise UserError("eval with detector=cnn requires --model")
        if not Path(model_path).exists():
            raise UserError(f"model file not found: {model_path}")
        model = cnn.load_model(model_path)
        probs = _predict_windows(model, point, test_bins)
        det = probs >= model.threshold
    else:
        bf_cfg = bf.calibrate(point.evidence[train_bins], point.labels[train_bins],
                              settings.prior_grid, settings.bf_threshold_grid,
                              bf.BfConfig(reliability_floor=settings.bf_floor,
                                          reliability_ceiling=settings.bf_ceiling))
        det = bf.probability_from_evidence(point.evidence[test_bins], bf_cfg.prior) >= bf_cfg.threshold
    report = evaluate_detections(det, point.labels, test_bins, ds, point.spec,
                                 settings, step_min, t0, t1)
    payload = {"detector": detector, "delta_s_km": cell_size, "delta_t_min": step_min,
               "rotation": rotation, **report.to_dict()}
    mdir = outdir / "metrics"
    mdir.mkdir(parents=True, exist_ok=True)
    mpath = mdir / f"{detector}_ds{cell_size:g}_dt{step_min}_rot{rotation}.metrics.json"
    mpath.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _read_candidates(path: Path) -> list[dict]:
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    return rows


def cmd_report(cfg: dict) -> int:
    outdir = Path(_section(cfg, "output")["dir"])
    cand_path = outdir / "candidates.csv"
    pareto_path = outdir / "pareto.json"
    for p in (cand_path, pareto_path):
        if not p.exists():
            raise UserError(f"missing sweep output: {p}")
    rows = _read_candidates(cand_path)
    if not rows:
        (outdir / "report.txt").write_text("no candidates\n", encoding="utf-8")
        print("no candidates")
        return 0

    def fval(row, key):
        return float(row[key]) if row[key] != "" else None

    # figure data: mean F1 versus each resolution axis, per detector
    def write_axis_csv(path, axis_key):
        groups = {}
        for r in rows:
            k = (r["detector"], float(r[axis_key]))
            groups.setdefault(k, []).append(float(r["f1"]))
        with path.open("w", newline="\n", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["detector", axis_key, "mean_f1"])
            for (det, v) in sorted(groups, key=lambda k: (k[0], k[1])):
                w.writerow([det, repr(v), repr(float(np.mean(groups[(det, v)])))])

    write_axis_csv(outdir / "fig2a.csv", "delta_s_km")
    write_axis_csv(outdir / "fig2b.csv", "delta_t_min")

    with (outdir / "fig3.csv").open("w", newline="\n", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta_s_km", "delta_t_min", "f1", "in_archive", "detector"])
        for r in rows:
            w.writerow([r["delta_s_km"], r["delta_t_min"], r["f1"], r["in_archive"],
                        r["detector"]])

    # text table: best row per detector for each practitioner criterion
    detectors = sorted({r["detector"] for r in rows})
    sections = [
        ("Best Early Pred %", lambda r: -(fval(r, "early_pred_pct") or 0.0)),
        ("Best Avg. Distance", lambda r: (fval(r, "avg_distance_km") is None,
                                          fval(r, "avg_distance_km") or 0.0)),
        ("Best Avg. Early Time", lambda r: (fval(r, "avg_early_time_min") is None,
                                            -(fval(r, "avg_early_time_min") or 0.0))),
    ]
    lines = []
    header = (f"{'Model':8} {'ds(km)':>7} {'dt(min)':>8} {'F1':>7} {'Early%':>7} "
              f"{'AvgDist':>8} {'AvgEarly':>9} {'Prec':>6} {'Rec':>6}")
    for title, keyfn in sections:
        lines.append(f"== {title} ==")
        lines.append(header)
        for det in detectors:
            det_rows = [r for r in rows if r["detector"] == det]
            best = sorted(det_rows, key=keyfn)[0]
            lines.append(
                f"{det.upper():8} {float(best['delta_s_km']):>7g} {float(best['delta_t_min']):>8g} "
                f"{float(best['f1']):>7.4f} {fval(best, 'early_pred_pct') or 0.0:>7.2f} "
                f"{'-' if fval(best, 'avg_distance_km') is None else format(fval(best, 'avg_distance_km'), '8.3f'):>8} "
                f"{'-' if fval(best, 'avg_early_time_min') is None else format(fval(best, 'avg_early_time_min'), '9.2f'):>9} "
                f"{fval(best, 'precision') or 0.0:>6.3f} {fval(best, 'recall') or 0.0:>6.3f}")
        lines.append("")
    text = "\n".join(lines)
    (outdir / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"plot data written: {outdir / 'fig2a.csv'}, {outdir / 'fig2b.csv'}, "
          f"{outdir / 'fig3.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowddetect",
        description="Early incident detection from crowdsourced reports with "
                    "Pareto selection of deployment-ready models.")
    parser.add_argument("--config", help="JSON config file (overrides defaults)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--overwrite", action="store_true",
                        help="regenerate outputs that already exist")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate the synthetic scenario's data files")

    p = sub.add_parser("featurize", help="dump window tensors for diffing")
    p.add_argument("--cell-size", type=float, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--start-bin", type=int, default=0)
    p.add_argument("--count", type=int, default=10)

    p = sub.add_parser("train", help="train one CNN at a grid point")
    p.add_argument("--cell-size", type=float, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--rotation", type=int, default=0)
    p.add_argument("--paper-arch", action="store_true",
                   help="use the full 256-filter architecture")

    p = sub.add_parser("eval", help="evaluate a detector on one test month")
    p.add_argument("--detector", choices=["cnn", "bf"], default="cnn")
    p.add_argument("--model", help="model file (required for cnn)")
    p.add_argument("--cell-size", type=float, required=True)
    p.add_argument("--step", type=int, required=True)
    p.add_argument("--rotation", type=int, default=0)

    p = sub.add_parser("sweep", help="run the full resolution sweep")
    p.add_argument("--paper-arch", action="store_true",
                   help="use the full 256-filter architecture")

    sub.add_parser("report", help="summarize sweep outputs and emit plot data")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.overwrite)
        if args.command == "featurize":
            return cmd_featurize(cfg, args.cell_size, args.step, args.start_bin, args.count)
        if args.command == "train":
            return cmd_train(cfg, args.cell_size, args.step, args.rotation,
                             args.overwrite, args.paper_arch)
        if args.command == "eval":
            return cmd_eval(cfg, args.detector, args.model, args.cell_size, args.step,
                            args.rotation)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.overwrite, args.paper_arch)
        if args.command == "report":
            return cmd_report(cfg)
        raise UserError(f"unknown command {args.command!r}")
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
