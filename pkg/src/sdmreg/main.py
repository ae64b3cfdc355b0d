"""Command-line entry point for sdmreg."""

import argparse
import csv
import dataclasses
import functools
import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from dotenv import load_dotenv

from .batching import BatchConfig, BatchProcessor, CaseJob
from .config import Config, ConfigManager, LoggingConfig, RegistrationConfig
from .errors import SdmregError
from .losses import MODE_PRESETS
from .optimizer import RegistrationResult, coarse_baseline, register
from .phantom import PhantomPair, PhantomSpec, generate
from .prealign import coarse_align
from .preprocessing import normalize_intensity
from .sdm import signed_distance_map
from .storage import (
    CaseManifest,
    LandmarkPair,
    collect_runs,
    load_case_data,
    load_manifest,
    read_mhd,
    write_manifest,
    write_mhd,
    write_report,
)
from .volume import Volume, VolumeKind, resample_to_grid, warp

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

REGISTER_MODES = ("mdsc", "sdm", "mix", "coarse")


class CliArgumentParser(argparse.ArgumentParser):
    """Argument parser that exits with the usage error code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def configure_logging(config: LoggingConfig) -> None:
    """Install console and optional (rotating) file handlers on the root logger."""
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, "_sdmreg", False)]:
        root.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(config.format)
    handlers: List[logging.Handler] = []
    if config.console:
        handlers.append(logging.StreamHandler(sys.stderr))
    if config.file:
        log_path = Path(config.file).expanduser()
        log_path.parent.mkdir(parents=True, exist_ok=True)
        if config.rotate_logs:
            handlers.append(logging.handlers.RotatingFileHandler(
                log_path, maxBytes=config.max_log_size, backupCount=config.backup_count
            ))
        else:
            handlers.append(logging.FileHandler(log_path))
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._sdmreg = True
        root.addHandler(handler)
    root.setLevel(config.level.upper())


def _parse_dims(text: str) -> tuple:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be three comma-separated integers, got '{text}'")
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"dims must have three entries, got '{text}'")
    return dims


def _write_json(path: Path, data: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def _read_volume(path: str, kind: VolumeKind) -> Volume:
    volume = read_mhd(path, kind=kind)
    if not isinstance(volume, Volume):
        raise SdmregError(f"{path}: expected a single-channel volume")
    return volume


def load_app_config(profile: Optional[str], config_path: Optional[str]) -> Config:
    return ConfigManager().load(profile, Path(config_path) if config_path else None)


def resolve_registration_config(
    mode: str, profile: Optional[str] = None, config_path: Optional[str] = None, seed: Optional[int] = None
) -> RegistrationConfig:
    """Registration settings for a mode: preset weights unless the config file sets them."""
    manager = ConfigManager()
    loss_mode = mode if mode in MODE_PRESETS else "mix"
    config = manager.load(profile or loss_mode, Path(config_path) if config_path else None)
    registration = config.registration

    file_weights = {}
    if config_path:
        file_weights = manager.load_from_file(Path(config_path)).get("registration", {}).get("weights", {})
    if profile and not file_weights:
        registration = dataclasses.replace(registration, weights=MODE_PRESETS[loss_mode])
    if seed is not None:
        registration = dataclasses.replace(registration, seed=seed)
    return registration


# ---------------------------------------------------------------- phantom

def _write_phantom(pair: PhantomPair, case_dir: Path, case_id: str) -> CaseManifest:
    write_mhd(pair.moving_mask, case_dir / "moving_mask.mhd")
    write_mhd(pair.fixed_mask, case_dir / "fixed_mask.mhd")
    write_mhd(pair.true_ddf, case_dir / "true_ddf.mhd")
    landmarks = []
    for lm_id in pair.fixed_landmarks.ids:
        write_mhd(pair.moving_landmarks.landmarks[lm_id], case_dir / "landmarks" / f"moving_{lm_id}.mhd")
        write_mhd(pair.fixed_landmarks.landmarks[lm_id], case_dir / "landmarks" / f"fixed_{lm_id}.mhd")
        landmarks.append(LandmarkPair(
            id=lm_id,
            moving=Path("landmarks") / f"moving_{lm_id}.mhd",
            fixed=Path("landmarks") / f"fixed_{lm_id}.mhd",
        ))
    case = CaseManifest(
        case_id=case_id,
        moving_mask=Path("moving_mask.mhd"),
        fixed_mask=Path("fixed_mask.mhd"),
        landmarks=landmarks,
    )
    write_manifest([case], case_dir / "case.json")
    _write_json(case_dir / "phantom_spec.json", pair.spec.to_dict())
    return case


def _rebase(case: CaseManifest, prefix: Path) -> CaseManifest:
    return case.model_copy(update={
        "moving_mask": prefix / case.moving_mask,
        "fixed_mask": prefix / case.fixed_mask,
        "landmarks": [
            lm.model_copy(update={"moving": prefix / lm.moving, "fixed": prefix / lm.fixed})
            for lm in case.landmarks
        ],
    })


def cmd_phantom(args: argparse.Namespace) -> int:
    spec = PhantomSpec()
    if args.spec:
        spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text()))
    if args.count < 1:
        raise ValueError("--count must be >= 1")

    out = Path(args.out)
    cases = []
    for index in range(args.count):
        seed = spec.seed + index
        case_id = f"phantom_{seed:03d}"
        pair = generate(spec.with_seed(seed))
        case = _write_phantom(pair, out / case_id, case_id)
        cases.append(_rebase(case, Path(case_id)))
        logger.info("Wrote phantom %s", case_id)
    write_manifest(cases, out / "manifest.json")
    print(f"wrote {len(cases)} phantom(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- prealign

def cmd_prealign(args: argparse.Namespace) -> int:
    config = load_app_config(args.profile, args.config)
    target_dims = args.dims or config.preprocess.target_dims
    target_spacing = args.spacing or config.preprocess.target_spacing
    percentile = config.preprocess.percentile

    moving = _read_volume(args.moving, VolumeKind.INTENSITY) if args.moving else None
    fixed = _read_volume(args.fixed, VolumeKind.INTENSITY) if args.fixed else None
    moving_mask = _read_volume(args.moving_mask, VolumeKind.BINARY_MASK)
    fixed_mask = _read_volume(args.fixed_mask, VolumeKind.BINARY_MASK)
    if moving is not None:
        moving = normalize_intensity(moving, percentile)
    if fixed is not None:
        fixed = normalize_intensity(fixed, percentile)

    result = coarse_align(moving, moving_mask, fixed, fixed_mask, target_dims, target_spacing)

    out = Path(args.out)
    write_mhd(result.moving_mask_out, out / "moving_mask.mhd")
    write_mhd(result.fixed_mask_out, out / "fixed_mask.mhd")
    case = {"case_id": args.case_id, "moving_mask": "moving_mask.mhd", "fixed_mask": "fixed_mask.mhd"}
    if result.moving_out is not None:
        write_mhd(result.moving_out, out / "moving.mhd")
        case["moving_image"] = "moving.mhd"
    if result.fixed_out is not None:
        write_mhd(result.fixed_out, out / "fixed.mhd")
        case["fixed_image"] = "fixed.mhd"

    landmarks = []
    for lm_id, moving_path, fixed_path in args.landmark or []:
        moving_lm = resample_to_grid(
            _read_volume(moving_path, VolumeKind.BINARY_MASK), result.grid, translation=result.translation
        )
        fixed_lm = resample_to_grid(_read_volume(fixed_path, VolumeKind.BINARY_MASK), result.grid)
        write_mhd(moving_lm, out / "landmarks" / f"moving_{lm_id}.mhd")
        write_mhd(fixed_lm, out / "landmarks" / f"fixed_{lm_id}.mhd")
        landmarks.append({"id": lm_id, "moving": f"landmarks/moving_{lm_id}.mhd", "fixed": f"landmarks/fixed_{lm_id}.mhd"})
    if landmarks:
        case["landmarks"] = landmarks

    _write_json(out / "translation.json", {"translation_mm": [float(t) for t in result.translation]})
    write_manifest([CaseManifest.model_validate(case)], out / "case.json")
    print(f"translation (mm): {' '.join(f'{t:.4f}' for t in result.translation)}")
    return EXIT_OK


# ---------------------------------------------------------------- register

def _write_loss_trace(result: RegistrationResult, path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration", "stage", "total", "mdsc", "msle", "bending"])
        for i, (stage, loss) in enumerate(zip(result.stage_of_iteration, result.loss_trace)):
            writer.writerow([i, stage] + [repr(v) for v in (loss.total, loss.mdsc, loss.msle, loss.bending)])


def write_run_artifacts(job: CaseJob, result: RegistrationResult, moving_mask: Volume) -> None:
    """DDF, warped mask, metrics, loss trace and timing of one run."""
    out = job.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_mhd(result.ddf, out / "ddf.mhd")
    write_mhd(warp(moving_mask, result.ddf).binarize(), out / "warped_mask.mhd")
    metrics = {
        "case_id": job.case_id,
        "mode": job.mode,
        **result.metrics.to_dict(),
        "iterations": result.total_iterations,
        "iterations_per_level": result.iterations_used,
        "initial_total": result.initial_loss.total,
        "final_total": result.final_loss.total,
        "seed": result.seed,
    }
    _write_json(out / "metrics.json", metrics)
    _write_loss_trace(result, out / "loss_trace.csv")
    _write_json(out / "timing.json", {"wall_time_s": result.wall_time_s})


def run_case(job: CaseJob, config: RegistrationConfig) -> RegistrationResult:
    """Load, register and write one case."""
    data = load_case_data(job.case)
    runner = coarse_baseline if job.mode == "coarse" else register
    result = runner(data.moving_mask, data.fixed_mask, config, data.moving_landmarks, data.fixed_landmarks)
    write_run_artifacts(job, result, data.moving_mask)
    return result


def cmd_register(args: argparse.Namespace) -> int:
    registration = resolve_registration_config(args.mode, args.profile, args.config, args.seed)
    cases = load_manifest(args.case)
    out = Path(args.out)
    jobs = [CaseJob(case=case, mode=args.mode, out_dir=out / case.case_id / args.mode) for case in cases]

    processor = BatchProcessor(
        functools.partial(run_case, config=registration), BatchConfig(max_workers=args.workers)
    )
    outcomes = processor.run(jobs)
    failed = [o for o in outcomes if not o.ok]
    for outcome in outcomes:
        if outcome.ok:
            m = outcome.result.metrics
            print(f"{outcome.job.case_id} [{args.mode}] DSC {m.dsc_whole:.4f} "
                  f"jac_grad_x100 {m.jac_grad_x100:.3f}")
    if failed:
        for outcome in failed:
            print(f"error: case {outcome.job.case_id}: {outcome.error}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------- sdm / evaluate

def cmd_sdm(args: argparse.Namespace) -> int:
    mask = _read_volume(args.mask, VolumeKind.BINARY_MASK)
    write_mhd(signed_distance_map(mask), Path(args.out))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    report = collect_runs(args.runs)
    write_report(report, Path(args.out))
    print(f"wrote {len(report.rows)} row(s) to {args.out}")
    return EXIT_OK


def build_parser() -> CliArgumentParser:
    parser = CliArgumentParser(
        prog="sdmreg",
        description="Segmentation-driven deformable registration with multiscale Dice and SDM losses",
    )
    parser.add_argument("--log-level", help="Override the configured log level")
    parser.add_argument("--log-file", help="Also log to this file (rotated)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="Generate synthetic phantom cases")
    p.add_argument("--spec", help="Phantom spec JSON (PhantomSpec fields)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--count", type=int, default=1, help="Number of phantoms (seeds spec.seed + i)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("prealign", help="Normalize and center-of-mass align a case")
    p.add_argument("--moving", help="Moving intensity image")
    p.add_argument("--moving-mask", required=True)
    p.add_argument("--fixed", help="Fixed intensity image")
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--landmark", nargs=3, action="append", metavar=("ID", "MOVING", "FIXED"),
                   help="Landmark mask pair carried along (repeatable)")
    p.add_argument("--case-id", default="case", help="Case id written to case.json")
    p.add_argument("--out", required=True)
    p.add_argument("--dims", type=_parse_dims, help="Target dims, e.g. 96,96,80")
    p.add_argument("--spacing", type=float, help="Target isotropic spacing in mm")
    p.add_argument("--config", help="Config file (YAML or JSON)")
    p.add_argument("--profile", help="Configuration profile")
    p.set_defaults(func=cmd_prealign)

    p = sub.add_parser("register", help="Register every case of a manifest")
    p.add_argument("--case", required=True, help="Case manifest JSON")
    p.add_argument("--mode", choices=REGISTER_MODES, default="mix")
    p.add_argument("--config", help="Config file (YAML or JSON)")
    p.add_argument("--profile", help="Run profile, e.g. fast or small-step")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1, help="Cases registered in parallel")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("sdm", help="Signed distance map of a mask")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sdm)

    p = sub.add_parser("evaluate", help="Aggregate run metrics into a CSV report")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        logging_config = load_app_config(getattr(args, "profile", None), getattr(args, "config", None)).logging
    except (ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    if args.verbose:
        logging_config.level = "DEBUG"
    elif args.log_level:
        logging_config.level = args.log_level
    if args.log_file:
        logging_config.file = args.log_file
    try:
        configure_logging(logging_config)
        return args.func(args)
    except (SdmregError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
