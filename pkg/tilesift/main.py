import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import get_settings
from logging_config import configure_logging
from error_handlers import EXIT_OK, report_error
from schemas import (
    GapMatrixRecord,
    MissRateTensorRecord,
    SCORERS,
    PositionPriorRecord,
    Scenario,
    SweepRecord,
)
from evaluators.hota_evaluator import hota
from evaluators.pareto_evaluator import OperatingPoint, frontier_to_csv, pareto, select
from services.analytics_service import AnalyticsService
from services.engine_service import EngineService
from services.exceptions import ArtifactError, ConfigError
from services.file_service import FileService, make_meta
from services.gap_service import DEFAULT_TOLERANCES, GapMatrix, GapSet, MissRateTensor, sweep_tolerances
from services.grid_service import PaddingMode
from services.packer_service import RenderedCanvas
from services.scene_service import PRESETS, build_preset
from services.sweep_service import (
    PADDINGS,
    RELEVANCE_THRESHOLDS,
    SAMPLING_RATES,
    SWEEP_TRACKERS,
    TOLERANCES,
    SweepService,
    spatial_variance,
    table_configs,
)
from services.tracker_service import TRACKERS, ground_truth_tracks, tracks_from_csv, tracks_to_csv
from services.validation_service import ScenarioValidationService, load_engine_config

logger = logging.getLogger(__name__)


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _csv_list(text: str, cast) -> List:
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


def _tolerance(text: str) -> Optional[float]:
    return None if text.lower() == "none" else float(text)


def _load_scenario(files: FileService, path: str) -> Scenario:
    scenario = files.load_model(path, Scenario)
    result = ScenarioValidationService().validate_scenario(scenario)
    for warning in result.warnings:
        logger.warning(f"{path}: {warning}")
    if not result.is_valid:
        raise ArtifactError(f"scenario {path} is invalid", details={"issues": result.issues})
    return scenario


def _write_run(files: FileService, out: str, report, command: str, scenario: Scenario) -> str:
    meta = make_meta(command, scenario.seed, report.config.model_dump(by_alias=True, mode="json"))
    files.save_csv(out, tracks_to_csv(report.tracks), meta)
    files.save_model(os.path.splitext(out)[0] + ".report.json", report.to_record(meta))
    return out


def cmd_simulate(args, files: FileService) -> int:
    if args.frames < 1:
        raise ConfigError("--frames must be at least 1", details={"frames": args.frames})
    scenario = build_preset(args.preset, seed=args.seed, n_frames=args.frames,
                            frame_size=(args.width, args.height), tile_size=args.tile_size)
    scenario = scenario.model_copy(update={"meta": make_meta("simulate", args.seed, {
        "preset": args.preset, "frames": args.frames, "width": args.width,
        "height": args.height, "tile_size": args.tile_size,
    })})
    out = args.out or files.path("scenarios", f"{args.preset}-{args.seed}.json")
    files.save_model(out, scenario)
    print(out)
    return EXIT_OK


def cmd_reference(args, files: FileService) -> int:
    scenario = _load_scenario(files, args.scenario)
    report = EngineService().reference_run(scenario, args.tracker)
    out = args.out or files.path("runs", f"{_stem(args.scenario)}.reference-{args.tracker}.csv")
    print(_write_run(files, out, report, "reference", scenario))
    return EXIT_OK


def cmd_learn_gaps(args, files: FileService) -> int:
    if not 0.0 <= args.prior_floor <= 1.0:
        raise ConfigError("--prior-floor must lie in [0, 1]", details={"prior_floor": args.prior_floor})
    gammas = GapSet.parse(args.gamma)
    scenarios = [_load_scenario(files, path) for path in args.scenario]
    engine = EngineService()
    tensor = engine.learn_gap_tensor(scenarios, args.tracker, gammas)
    meta = make_meta("learn-gaps", scenarios[0].seed, {
        "tracker": args.tracker, "gammas": list(gammas), "scenarios": list(args.scenario),
    })
    out = args.out or files.path("artifacts", f"{_stem(args.scenario[0])}.tensor-{args.tracker}.json")
    files.save_model(out, tensor.to_record(meta))
    print(out)
    base = os.path.splitext(out)[0]
    for matrix in sweep_tolerances(tensor, DEFAULT_TOLERANCES):
        path = f"{base}.gaps-{matrix.tolerance}.json"
        files.save_model(path, matrix.to_record(meta))
        print(path)
    prior = engine.learn_position_prior(scenarios, args.prior_floor)
    prior_path = f"{base}.prior.json"
    files.save_model(prior_path, PositionPriorRecord(floor=args.prior_floor, values=prior.tolist(), meta=meta))
    print(prior_path)
    return EXIT_OK


def _load_tensors(files: FileService, specs: Sequence[str]) -> Dict[str, MissRateTensor]:
    """`tracker=path` or a bare path whose metadata names the tracker"""
    tensors = {}
    for spec in specs:
        tracker, sep, path = spec.partition("=")
        if not sep:
            path, tracker = spec, None
        record = files.load_model(path, MissRateTensorRecord)
        if tracker is None:
            tracker = (record.meta.config.get("tracker") if record.meta else None) or "sort"
        tensors[tracker] = MissRateTensor.from_record(record)
    return tensors


def _load_prior(files: FileService, path: Optional[str]) -> Optional[np.ndarray]:
    if not path:
        return None
    return np.asarray(files.load_model(path, PositionPriorRecord).values, dtype=np.float64)


def cmd_sweep(args, files: FileService) -> int:
    scenario = _load_scenario(files, args.scenario)
    tensors = _load_tensors(files, args.tensor or [])
    configs = table_configs(
        sampling_rates=_csv_list(args.s, int),
        thresholds=_csv_list(args.t_r, float),
        tolerances=_csv_list(args.m_bar, _tolerance),
        paddings=_csv_list(args.padding, PaddingMode),
        trackers=_csv_list(args.trackers, str),
        scorer=args.scorer,
    )
    prior = _load_prior(files, args.prior)
    points = SweepService(workers=args.workers).sweep(scenario, tensors, configs, position_prior=prior)
    meta = make_meta("sweep", scenario.seed, {
        "scenario": args.scenario, "configs": len(configs), "scorer": args.scorer, "prior": args.prior,
    })
    out = args.out or files.path("frontiers", f"{_stem(args.scenario)}.sweep.json")
    files.save_model(out, SweepRecord(points=[p.to_record() for p in points], meta=meta))
    frontier_path = os.path.splitext(out)[0] + ".frontier.csv"
    files.save_csv(frontier_path, frontier_to_csv(pareto(points)), meta)
    print(out)
    print(frontier_path)
    return EXIT_OK


def cmd_pareto(args, files: FileService) -> int:
    record = files.load_model(args.sweep, SweepRecord)
    points = [OperatingPoint.from_record(p) for p in record.points]
    frontier = pareto(points)
    if args.out:
        files.save_csv(args.out, frontier_to_csv(frontier), make_meta("pareto", None, {"sweep": args.sweep}))
    if args.min_fps is None and args.max_hota_loss is None:
        print(frontier_to_csv(frontier), end="")
        return EXIT_OK
    chosen = select(frontier, min_fps=args.min_fps, max_accuracy_loss=args.max_hota_loss)
    if args.config_out:
        files.save_model(args.config_out, chosen.config)
    print(chosen.to_record().model_dump_json(indent=2))
    return EXIT_OK


def _canvas_writer(files: FileService, directory: str):
    """Saves each rendered canvas as a raw buffer plus its placement manifest"""
    def write(rendered: RenderedCanvas):
        name = os.path.join(directory, f"canvas-{rendered.canvas.canvas_id:05d}")
        files.save_canvas(name + ".raw", rendered.canvas.canvas_id, rendered.pixels)
        files.save_model(name + ".manifest.json", rendered.canvas.to_manifest())
    return write


def cmd_extract(args, files: FileService) -> int:
    scenario = _load_scenario(files, args.scenario)
    cfg = load_engine_config(files.load_json(args.config))
    gaps = GapMatrix.from_record(files.load_model(args.gaps, GapMatrixRecord)) if args.gaps else None
    prior = _load_prior(files, args.prior)
    check = ScenarioValidationService().validate_run_inputs(scenario, cfg, gaps, prior)
    for warning in check.warnings:
        logger.warning(warning)
    if not check.is_valid:
        raise ConfigError("configuration does not fit its inputs", details={"issues": check.issues})
    sink = _canvas_writer(files, args.canvases) if args.canvases else None
    report = EngineService().run(scenario, cfg, gaps, prior, canvas_sink=sink)
    out = args.out or files.path("runs", f"{_stem(args.scenario)}.extract.csv")
    print(_write_run(files, out, report, "extract", scenario))
    summary_path = os.path.splitext(out)[0] + ".summary.json"
    files.save_json(summary_path, {
        "run": AnalyticsService.run_summary(report),
        "packing": AnalyticsService.packing_summary(report.canvas_layouts),
    })
    print(summary_path)
    return EXIT_OK


def cmd_evaluate(args, files: FileService) -> int:
    predicted = tracks_from_csv(files.load_text(args.tracks))
    if args.reference:
        reference = tracks_from_csv(files.load_text(args.reference))
    else:
        reference = ground_truth_tracks(_load_scenario(files, args.ground_truth))
    print(hota(predicted, reference).to_record().model_dump_json(indent=2))
    return EXIT_OK


def cmd_analyze(args, files: FileService) -> int:
    scenario = _load_scenario(files, args.scenario)
    stats = AnalyticsService.observation_stats(scenario)
    if args.tensor and scenario.regions:
        tensor = MissRateTensor.from_record(files.load_model(args.tensor, MissRateTensorRecord))
        stats["region_mistrack_rates"] = spatial_variance(tensor, args.gamma, scenario)
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_ablate_gaps(args, files: FileService) -> int:
    if args.train and args.validation:
        train = _load_scenario(files, args.train)
        validation = _load_scenario(files, args.validation)
    else:
        train = build_preset("intersection", seed=args.seed, n_frames=args.frames, frame_size=(96, 96), tile_size=32)
        validation = build_preset("intersection", seed=args.seed + 1, n_frames=args.frames, frame_size=(96, 96), tile_size=32)
    result = SweepService(workers=args.workers).gap_ablation(
        train, validation, gammas=GapSet.parse(args.gamma).values, tracker=args.tracker,
    )
    meta = make_meta("ablate-gaps", args.seed, {"tracker": args.tracker, "gammas": list(result.gammas)})
    out = args.out or files.path("frontiers", "gap-ablation.json")
    files.save_model(out, result.to_record(meta))
    print(out)
    print(f"max HOTA loss vs exhaustive: {result.max_hota_loss:.4f}")
    return EXIT_OK


def _join(values) -> str:
    return ",".join("none" if v is None else str(getattr(v, "value", v)) for v in values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilesift",
        description="Tile-level frame pruning and packing for multi-object tracking",
    )
    parser.add_argument("--workspace", help="Workspace directory (default: TILESIFT_WORKSPACE)")
    parser.add_argument("--log-level", help="Logging level (default: TILESIFT_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Write a synthetic scenario")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--tile-size", type=int, default=16)
    p.add_argument("--out", help="Scenario JSON path")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("reference", help="Full-frame, every-frame tracks")
    p.add_argument("--scenario", required=True)
    p.add_argument("--tracker", choices=TRACKERS, default="sort")
    p.add_argument("--out", help="Tracks CSV path; the run report goes next to it")
    p.set_defaults(handler=cmd_reference)

    p = sub.add_parser("learn-gaps", help="Measure mistrack rates and derive gap matrices")
    p.add_argument("--scenario", nargs="+", required=True, help="One or more training scenarios")
    p.add_argument("--tracker", choices=TRACKERS, default="sort")
    p.add_argument("--gamma", default="1,2,4,8,16", help="Candidate gaps, must include 1")
    p.add_argument("--prior-floor", type=float, default=0.0, help="Position prior weight of never-relevant tiles")
    p.add_argument("--out", help="Tensor JSON path; matrices go next to it")
    p.set_defaults(handler=cmd_learn_gaps)

    p = sub.add_parser("sweep", help="Run every configuration and record operating points")
    p.add_argument("--scenario", required=True, help="Validation scenario")
    p.add_argument("--tensor", action="append", help="Mistrack tensor, as tracker=path or path (repeatable)")
    p.add_argument("--s", default=_join(SAMPLING_RATES))
    p.add_argument("--t-r", default=_join(RELEVANCE_THRESHOLDS))
    p.add_argument("--m-bar", default=_join(TOLERANCES))
    p.add_argument("--padding", default=_join(PADDINGS))
    p.add_argument("--trackers", default=_join(SWEEP_TRACKERS))
    p.add_argument("--scorer", choices=SCORERS, default="oracle")
    p.add_argument("--prior", help="Position prior JSON for the motion scorer")
    p.add_argument("--workers", type=int, help="Process pool size (default: TILESIFT_WORKERS)")
    p.add_argument("--out", help="Sweep JSON path; the frontier CSV goes next to it")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("pareto", help="Frontier of a sweep and operating point selection")
    p.add_argument("--sweep", required=True)
    constraint = p.add_mutually_exclusive_group()
    constraint.add_argument("--min-fps", type=float, help="Most accurate point at or above this throughput")
    constraint.add_argument("--max-hota-loss", type=float, help="Fastest point losing at most this much HOTA")
    p.add_argument("--out", help="Frontier CSV path")
    p.add_argument("--config-out", help="Write the selected engine config JSON here")
    p.set_defaults(handler=cmd_pareto)

    p = sub.add_parser("extract", help="Run the engine with one configuration")
    p.add_argument("--scenario", required=True)
    p.add_argument("--config", required=True, help="Engine config JSON")
    p.add_argument("--gaps", help="Gap matrix JSON (required when M_bar is set)")
    p.add_argument("--prior", help="Position prior JSON for the motion scorer")
    p.add_argument("--canvases", help="Directory for rendered canvases and their manifests")
    p.add_argument("--out", help="Tracks CSV path")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("evaluate", help="HOTA of a tracks CSV")
    p.add_argument("--tracks", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--reference", help="Reference tracks CSV")
    source.add_argument("--ground-truth", help="Scenario JSON whose objects are the reference")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("analyze", help="Tile relevance and window overhead statistics")
    p.add_argument("--scenario", required=True)
    p.add_argument("--tensor", help="Mistrack tensor for per-region rates")
    p.add_argument("--gamma", type=int, default=4)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("ablate-gaps", help="Learned gap matrices against every per-tile gap assignment")
    p.add_argument("--train")
    p.add_argument("--validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--gamma", default="1,2,4")
    p.add_argument("--tracker", choices=TRACKERS, default="sort")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_ablate_gaps)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    configure_logging(args.log_level or settings.log_level, settings.log_file)
    try:
        files = FileService(args.workspace)
        return args.handler(args, files)
    except Exception as e:
        return report_error(e)


if __name__ == "__main__":
    sys.exit(main())
