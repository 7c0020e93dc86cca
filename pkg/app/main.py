"""
Command-line entry point for the compressive slice-and-view simulator.

Subcommands:
- phantom      Generate a synthetic volume stack
- subsample    Mask and measure one layer
- reconstruct  Inpaint one slice from a measurement
- denoise      Full-mask dictionary pass over a stack
- pipeline     Full sweep from a JSON config
- metrics      SSIM/PSNR between two stacks
- summarize    Aggregate a results CSV
- preview      PNG montage of layers from a finished sweep

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

# Load environment variables FIRST (before importing app modules that use them)
load_dotenv('.env.local')  # Load local overrides first
load_dotenv()  # Load .env as fallback

from app import utils, processing
from app.processing import bpfa
from app.processing.core import apply_mask, layer_seed, spawn_rngs
from app.processing.models import ExperimentConfig, PhantomSpec, Strategy, TsConfig, sample_count
from app.processing.phantom import generate_phantom
from app.processing.pipeline import denoise_volume, summarize
from app.processing.previews import render_layer_montage
from app.processing.quality import volume_mean_psnr, volume_mean_ssim
from app.processing.sampling import ts_mask

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _env_flag(name: str, default: bool = False) -> bool:
    """
    Parse common truthy/falsey env var values.
    """
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def _load_config(path: Optional[str]) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.model_validate_json(fh.read())


def _strict(args) -> bool:
    return bool(args.strict_sequential) or _env_flag("SIM_STRICT_SEQUENTIAL")


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, default=float))


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_phantom(args) -> int:
    config = _load_config(args.config)
    spec = config.phantom or PhantomSpec()
    overrides = {k: v for k, v in {
        "n1": args.n1, "n2": args.n2, "n3": args.n3, "kind": args.kind, "drift_rate": args.drift_rate,
    }.items() if v is not None}
    spec = PhantomSpec(**{**spec.model_dump(), **overrides})
    seed = args.seed if args.seed is not None else config.phantom_seed
    volume = generate_phantom(spec, seed)
    out = args.out or os.path.join(config.output_dir, "phantom")
    utils.write_volume(volume, out)
    _emit({"path": out, "n1": volume.n1, "n2": volume.n2, "n3": volume.n3, "kind": spec.kind})
    return EXIT_OK


def cmd_subsample(args) -> int:
    config = _load_config(args.config)
    volume = utils.read_volume(args.input)
    if args.layer < 0 or args.layer >= volume.n3:
        raise ValueError(f"Layer {args.layer} out of range for a {volume.n3}-layer stack")
    truth = volume.layer(args.layer)
    prev = utils.read_slice(args.prev, truth.shape) if args.prev else None

    strategy = Strategy(args.strategy)
    rho = args.rho if args.rho is not None else config.rho
    sub_seed = layer_seed(args.seed or 0, args.layer)
    mask_rng, noise_rng, _ = spawn_rngs(sub_seed, 3)
    ts = TsConfig(rho=rho, strategy=strategy, m=sample_count(args.ratio, volume.n_bar))
    mask = ts_mask(ts, prev, mask_rng, shape=truth.shape).model_copy(update={"seed": sub_seed, "rho": rho})
    noise = args.noise_sigma if args.noise_sigma is not None else config.noise_sigma
    measurement = apply_mask(truth, mask, noise, noise_rng)

    out = args.out or config.output_dir
    image_path = os.path.join(out, f"measurement_{args.layer:04d}.pgm")
    mask_path = os.path.join(out, f"mask_{args.layer:04d}.pbm")
    utils.write_measurement(measurement, image_path, mask_path)
    _emit({"measurement": image_path, "mask": mask_path, "m": mask.m,
           "m_targeted": mask.m_targeted, "m_random": mask.m_random})
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    config = _load_config(args.config)
    learner = config.bpfa.model_copy(update={"workers": 1}) if _strict(args) else config.bpfa
    measurement = utils.read_measurement(args.measurement, args.mask)
    n1, n2 = measurement.shape
    patchset = bpfa.extract_patches(measurement, n1, n2, learner.b)
    state = bpfa.infer(measurement, n1, n2, learner, args.seed or 0, patchset=patchset)
    recon = bpfa.reconstruct_slice(state, patchset, n1, n2)

    out = args.out or os.path.join(config.output_dir, "reconstruction.pgm")
    utils.write_slice(recon, out)
    if args.checkpoint:
        utils.save_state(state, args.checkpoint)
    _emit({"path": out, "rss_history": state.rss_history, "n_batches": state.n_batches})
    return EXIT_OK


def cmd_denoise(args) -> int:
    config = _load_config(args.config)
    learner = config.bpfa.model_copy(update={"workers": 1}) if _strict(args) else config.bpfa
    volume = utils.read_volume(args.input)
    out = args.out or os.path.join(config.output_dir, "denoised")
    utils.write_volume(denoise_volume(volume, learner, args.seed or 0), out)
    _emit({"path": out, "n3": volume.n3})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if not args.config:
        raise UsageError("pipeline needs --config")
    config = _load_config(args.config)
    threads_configured = "threads" in config.model_fields_set
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out:
        updates["output_dir"] = args.out
    if updates:
        config = ExperimentConfig(**{**config.model_dump(), **updates})
    records = processing.run_experiment(
        config,
        threads=args.threads or (None if threads_configured else processing.MAX_WORKERS),
        strict_sequential=_strict(args) or config.strict_sequential,
    )
    _emit({"output_dir": config.output_dir, "rows": len(records),
           "errors": sum(1 for r in records if r.error)})
    return EXIT_OK


def cmd_metrics(args) -> int:
    config = _load_config(args.config)
    recon = utils.read_volume(args.recon)
    truth = utils.read_volume(args.truth)
    mean_ssim, per_layer = volume_mean_ssim(recon, truth, config.ssim)
    mean_psnr, per_layer_psnr = volume_mean_psnr(recon, truth, config.ssim.dynamic_range)
    _emit({"ssim_mean": mean_ssim, "ssim": per_layer, "psnr_mean": mean_psnr, "psnr": per_layer_psnr})
    return EXIT_OK


def cmd_summarize(args) -> int:
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.input)), processing.SUMMARY_FILE)
    table = summarize(args.input, out)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_preview(args) -> int:
    config = _load_config(args.config)
    run_dir = args.run or config.output_dir
    out = args.out or os.path.join(run_dir, "preview.png")
    render_layer_montage(run_dir, args.layers, args.ratio, args.seed or 0, output_path=out)
    _emit({"path": out})
    return EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ExperimentConfig JSON file")
    common.add_argument("--seed", type=int, help="Unsigned 64-bit seed")
    common.add_argument("--out", help="Output path (file or directory, per subcommand)")
    common.add_argument("--threads", type=int, help="Worker threads for the sweep")
    common.add_argument("--strict-sequential", action="store_true", help="Single-threaded, bit-exact mode")

    parser = argparse.ArgumentParser(prog="slicesim", description="Compressive slice-and-view simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Generate a synthetic volume")
    p.add_argument("--kind", choices=["blob_cell", "stripes", "checker_drift"])
    p.add_argument("--n1", type=int)
    p.add_argument("--n2", type=int)
    p.add_argument("--n3", type=int)
    p.add_argument("--drift-rate", type=float)
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("subsample", parents=[common], help="Mask and measure one layer")
    p.add_argument("--input", required=True, help="Volume stack directory")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=Strategy.UDS.value)
    p.add_argument("--rho", type=float)
    p.add_argument("--prev", help="Previous layer's reconstruction (PGM), required for TS strategies")
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(handler=cmd_subsample)

    p = sub.add_parser("reconstruct", parents=[common], help="Inpaint one slice")
    p.add_argument("--measurement", required=True, help="Measurement PGM")
    p.add_argument("--mask", required=True, help="Mask PBM (with JSON sidecar)")
    p.add_argument("--checkpoint", help="Also save the learner state here (.npz + .json)")
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser("denoise", parents=[common], help="Full-mask pass over a stack")
    p.add_argument("--input", required=True)
    p.set_defaults(handler=cmd_denoise)

    p = sub.add_parser("pipeline", parents=[common], help="Run a full sweep")
    p.set_defaults(handler=cmd_pipeline)

    p = sub.add_parser("metrics", parents=[common], help="SSIM/PSNR between two stacks")
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("summarize", parents=[common], help="Aggregate a results CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(handler=cmd_summarize)

    p = sub.add_parser("preview", parents=[common], help="Layer comparison PNG")
    p.add_argument("--run", help="Sweep output directory (defaults to the config's output_dir)")
    p.add_argument("--layers", type=int, nargs="+", default=[0])
    p.add_argument("--ratio", type=float, required=True)
    p.set_defaults(handler=cmd_preview)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    try:
        return args.handler(args)
    except (UsageError, ValidationError) as e:
        logger.error(f"Invalid usage or configuration: {e}")
        return EXIT_USAGE
    except (bpfa.NumericalFailureError, FloatingPointError) as e:
        logger.error(f"Numerical failure: {e}", exc_info=True)
        return EXIT_NUMERICAL
    except (utils.FormatError, OSError, ValueError, processing.PipelineTimeoutError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
