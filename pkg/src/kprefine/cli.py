"""Command-line entry point.

Exit codes: 0 success, 1 data or validation error, 2 usage error.
Precedence for settings: command-line flags, then ``--config`` file, then
built-in defaults. The merged configuration is logged and echoed into every
JSON artifact (output paths and ``--jobs`` excluded so reruns compare equal).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .abg import FilterError, FilterParams
from .metrics import (
    MetricConfig,
    MetricError,
    MetricReport,
    compare_reports,
    evaluate,
    format_table,
    predictions_from_record,
    rows_to_csv,
)
from .refine import FusionConfig, RefineError, build_pools, refine_sequence
from .rotation import AngleSet, rotation_manifest
from .schema import (
    DEFAULT_SCHEME,
    SchemaError,
    load_annotations,
    load_detection_file,
    load_detections,
    read_json,
    validate_frame_range,
    write_json,
)
from .search import GridSpec, grid_search
from .synth import Scenario, SimulationError, write_dataset

log = logging.getLogger("kprefine")

OUTPUT_ENV = "KPREFINE_OUTPUT_DIR"
DATA_ERRORS = (SchemaError, FileNotFoundError, MetricError, RefineError, FilterError, SimulationError, ValueError)


class UsageError(Exception):
    pass


# -- argument types ---------------------------------------------------------


def _angles(text: str) -> AngleSet:
    try:
        angle_set = AngleSet.parse(text)
        angle_set.angles()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return angle_set


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("image sides must be positive")
    return w, h


def _unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} outside [0, 1]")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _list_of(conv):
    def parse(text: str):
        items = [t for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(conv(t.strip()) for t in items)

    return parse


# -- run configuration ------------------------------------------------------


@dataclass
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    angles: AngleSet = field(default_factory=AngleSet)
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fusion": self.fusion.to_dict(),
            "metric": self.metric.to_dict(),
            "angles": str(self.angles),
            "seed": self.seed,
            "paths": dict(sorted(self.paths.items())),
        }


def build_run_config(args) -> RunConfig:
    doc = read_json(args.config) if getattr(args, "config", None) else {}
    fusion = dict(doc.get("fusion", {}))
    for flag, key in (("k", "k"), ("alpha", "alpha"), ("beta", "beta"), ("gamma", "gamma"), ("floor", "confidence_floor")):
        v = getattr(args, flag, None)
        if v is not None:
            fusion[key] = v
    metric = dict(doc.get("metric", {}))
    if getattr(args, "pck", None) is not None:
        metric["pck_fraction"] = args.pck
    if getattr(args, "subset", None) is not None:
        metric["subset"] = args.subset
    angles = getattr(args, "angles", None) or (AngleSet.parse(doc["angles"]) if "angles" in doc else AngleSet())
    seed = args.seed if getattr(args, "seed", None) is not None else int(doc.get("seed", 0))
    cfg = RunConfig(FusionConfig.from_dict(fusion), MetricConfig.from_dict(metric, DEFAULT_SCHEME), angles, seed)
    log.info("merged config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _out_dir(arg: Optional[str], fallback: str) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get(OUTPUT_ENV, ".")) / fallback


# -- commands ---------------------------------------------------------------


def cmd_manifest(args) -> int:
    manifest = rotation_manifest(args.size, args.angles)
    if args.out:
        write_json(manifest, args.out)
        log.info("wrote %d rotations to %s", len(manifest["rotations"]), args.out)
    else:
        json.dump(manifest, sys.stdout, indent=1)
        sys.stdout.write("\n")
    return 0


def cmd_simulate(args) -> int:
    doc = read_json(args.spec) if args.spec else {}
    if args.frames is not None:
        doc.setdefault("trajectory", {})["n_frames"] = args.frames
    if args.angles is not None:
        doc["angles"] = str(args.angles)
    scenario = Scenario.from_dict(doc)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    gt, dets = scenario.run(seed, jobs=args.jobs)
    out = write_dataset(_out_dir(args.out, "simulated"), gt, dets)
    write_json({"scenario": scenario.to_dict(), "seed": seed}, out / "scenario.json")
    log.info("wrote %d frames x %d rotations to %s", len(gt.frames), len(dets.records), out)
    return 0


def cmd_refine(args) -> int:
    cfg = build_run_config(args)
    cfg.paths = {"detections": str(args.detections)}
    dets = load_detections(args.detections)
    frames = None
    if args.annotations:
        cfg.paths["annotations"] = str(args.annotations)
        seq = load_annotations(args.annotations)
        validate_frame_range(dets, seq)
        frames = seq.frame_indices
    refined = refine_sequence(dets, cfg.fusion, frames, jobs=args.jobs)
    doc = refined.to_dict({"run": cfg.to_dict()})
    doc["keypoint_names"] = list(DEFAULT_SCHEME.names)
    out = Path(args.out) if args.out else _out_dir(None, f"refined_{dets.video_id}.json")
    write_json(doc, out)
    log.info("refined %d frames from %d rotations -> %s", len(refined.frame_indices), len(dets.records), out)
    return 0


def _plot(args, cfg: RunConfig, preds, seq, out_dir: Path) -> list[Path]:
    from .plots import plot_keypoint_trace

    names = args.plot_keypoints or [DEFAULT_SCHEME.names[i] for i in cfg.metric.indices]
    candidates = None
    if args.detections:
        dets = load_detections(args.detections)
        candidates = build_pools(dets, seq.frame_indices, cfg.fusion.floor)
    written = []
    for name in names:
        try:
            j = DEFAULT_SCHEME.index(name)
        except ValueError:
            raise UsageError(f"unknown keypoint {name!r}") from None
        gt = np.array([(f.keypoints[j].x, f.keypoints[j].y) for f in seq.frames])
        vis = np.array([f.keypoints[j].visible for f in seq.frames])
        pred = np.array([
            preds[f.frame_index].coords[j] if f.frame_index in preds else (np.nan, np.nan) for f in seq.frames
        ])
        cands = None
        if candidates is not None:
            cands = [(idx, c.x, c.y, c.c) for idx, row in zip(seq.frame_indices, candidates) for c in row[j]]
        path = out_dir / "plots" / f"{seq.video_id}_{name}.svg"
        written.append(plot_keypoint_trace(path, f"{seq.video_id}: {name}", seq.frame_indices, gt, vis, pred, cands))
    return written


def cmd_evaluate(args) -> int:
    if len(args.predictions) != len(args.annotations):
        raise UsageError("give one --annotations file per --predictions file")
    cfg = build_run_config(args)
    cfg.paths = {"predictions": [str(p) for p in args.predictions], "annotations": [str(a) for a in args.annotations]}
    pairs = []
    for p_path, a_path in zip(args.predictions, args.annotations):
        seq = load_annotations(a_path)
        rec = load_detection_file(p_path)
        missing = sorted(set(seq.frame_indices) - {f.frame_index for f in rec.frames})
        if missing:
            log.warning("%s: no predictions for frames %s (counted as misses)", p_path, missing)
        pairs.append((predictions_from_record(rec, cfg.fusion.floor), seq))
    report = evaluate(pairs, cfg.metric, label=args.label or "", extra_config={"run": cfg.to_dict()})
    for cat, v in report.pck.items():
        if v is None:
            log.info("category %s absent; report cell left empty", cat)

    out = _out_dir(args.out, "evaluation")
    stem = args.label or "report"
    write_json(report.to_dict(), out / f"{stem}.json")
    (out / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    print(format_table([["metric", "all", "reg", "oob", "fall"], *report.rows()]))
    if args.plot:
        if len(pairs) != 1:
            raise UsageError("--plot supports a single prediction/annotation pair")
        for path in _plot(args, cfg, pairs[0][0], pairs[0][1], out):
            log.info("plot %s", path)
    return 0


def cmd_compare(args) -> int:
    before = MetricReport.from_dict(read_json(args.before))
    after = MetricReport.from_dict(read_json(args.after))
    rows = compare_reports(before, after)
    print(format_table(rows))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    return 0


def _video_dirs(paths) -> tuple[list, list]:
    dets, seqs = [], []
    for p in paths:
        p = Path(p)
        seqs.append(load_annotations(p / "annotations.json"))
        dets.append(load_detections(p / "detections"))
    return dets, seqs


def cmd_gridsearch(args) -> int:
    cfg = build_run_config(args)
    cfg.paths = {"data": [str(p) for p in args.data]}
    defaults = GridSpec()
    grid = GridSpec(
        k_values=args.k_values or defaults.k_values,
        alpha_values=args.alpha_values or defaults.alpha_values,
        beta_values=args.beta_values or defaults.beta_values,
        gamma_values=args.gamma_values or defaults.gamma_values,
        objective=args.objective,
        category=args.category,
        floor=cfg.fusion.floor,
    )
    dets, seqs = _video_dirs(args.data)
    result = grid_search(dets, seqs, grid, cfg.metric, jobs=args.jobs)
    out = _out_dir(args.out, "gridsearch")
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(result.to_csv(), encoding="utf-8")
    write_json(
        {"best": result.best.to_dict(), "best_score": result.best_score, "grid": grid.to_dict(), "run": cfg.to_dict()},
        out / "best.json",
    )
    b = result.best
    print(f"best k={b.k} alpha={b.params.alpha:g} beta={b.params.beta:g} gamma={b.params.gamma:g} "
          f"{grid.objective}={result.best_score:.4f} over {len(result.table)} grid points")
    return 0


# -- parser -----------------------------------------------------------------


def _add_fusion_flags(p) -> None:
    p.add_argument("--k", type=_positive_int, help="candidates fused per frame (default 12)")
    p.add_argument("--alpha", type=_unit, help="position gain (default 1)")
    p.add_argument("--beta", type=_unit, help="velocity gain (default 1)")
    p.add_argument("--gamma", type=_unit, help="acceleration gain (default 0)")
    p.add_argument("--floor", type=float, help="drop candidates with confidence at or below this (default 0)")


def _add_metric_flags(p) -> None:
    p.add_argument("--pck", type=float, help="PCK threshold as a fraction of torso diameter (default 0.2)")
    p.add_argument("--subset", choices=("body", "all"), help="keypoints entering the metrics (default body)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kprefine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="list rotation angles and canvas sizes for external detector runs")
    p.add_argument("--size", type=_size, required=True, help="original image size, WIDTHxHEIGHT")
    p.add_argument("--angles", type=_angles, default=AngleSet(), help="start:stop:step in degrees (default 0:360:10)")
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic annotated video with per-rotation detections")
    p.add_argument("--spec", help="scenario JSON (trajectory, noise, angles)")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="override the number of frames")
    p.add_argument("--angles", type=_angles)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/simulated)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("refine", parents=[common], help="fuse rotation candidates into refined keypoints")
    p.add_argument("--detections", required=True, help="directory with one detection file per angle")
    p.add_argument("--annotations", help="annotation file used to validate the frame range")
    p.add_argument("--out", help="refined JSON path")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", parents=[common], help="PCK and AP per frame category")
    p.add_argument("--predictions", required=True, nargs="+", help="refined or raw detection file(s)")
    p.add_argument("--annotations", required=True, nargs="+", help="matching annotation file(s)")
    p.add_argument("--label", help="report name, also used as file stem")
    p.add_argument("--out", help=f"report directory (default ${OUTPUT_ENV}/evaluation)")
    p.add_argument("--plot", action="store_true", help="write one SVG trace per keypoint")
    p.add_argument("--plot-keypoints", type=_list_of(str), help="comma-separated keypoint names to plot")
    p.add_argument("--detections", help="detection directory; adds rotation candidates to plots")
    p.add_argument("--floor", type=float, help="confidence floor for raw detections (default 0)")
    _add_metric_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="before/after/delta table of two reports")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gridsearch", parents=[common], help="grid search over k, alpha, beta, gamma")
    p.add_argument("--data", required=True, nargs="+",
                   help="video directories holding annotations.json and detections/")
    p.add_argument("--k-values", type=_list_of(_positive_int))
    p.add_argument("--alpha-values", type=_list_of(_unit))
    p.add_argument("--beta-values", type=_list_of(_unit))
    p.add_argument("--gamma-values", type=_list_of(_unit))
    p.add_argument("--objective", choices=("pck", "ap"), default="pck")
    p.add_argument("--category", choices=("all", "reg", "oob", "fall"))
    p.add_argument("--floor", type=float)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/gridsearch)")
    _add_metric_flags(p)
    p.set_defaults(func=cmd_gridsearch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
