## lesionseg/cli.py

"""
Command-line surface: synth, train, infer, refine, postprocess, eval, pipeline.

Every stage resizes its inputs to the working resolution, runs there, and
writes results at the source image size (probability maps bilinear, masks
nearest).
"""

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from analytics import imaging, plots
from analytics.dataset import (
    DatasetIndex,
    generate_synthetic_dataset,
    overlay_name,
    prob_name,
    truth_name,
)
from analytics.metrics import evaluate_dataset
from lesionseg import settings
from lesionseg.runconfig import RunConfig
from segmentation.densecrf import crf_refine
from segmentation.exceptions import DatasetError, ImageDecodeError, SegmentationError
from segmentation.maps import ProbabilityMap
from segmentation.network import infer_probability_map, load_checkpoint, save_checkpoint
from segmentation.postprocess import postprocess_pipeline
from segmentation.trainer import TrainSample, fit

logger = logging.getLogger(__name__)

METRICS_CSV = "metrics.csv"
LOSS_LOG = "train_loss.tsv"
RUN_CONF = "run.conf"

# flag dest -> RunConfig field
OVERRIDES = {
    "seed": "seed",
    "workers": "workers",
    "preset": "preset",
    "working_size": "working_size",
    "iterations": "iterations",
    "lr": "learning_rate",
    "aux_loss": "aux_loss",
    "crf_omega1": "crf_omega1",
    "crf_omega2": "crf_omega2",
    "crf_sigma_alpha": "crf_sigma_alpha",
    "crf_sigma_beta": "crf_sigma_beta",
    "crf_sigma_gamma": "crf_sigma_gamma",
    "crf_iters": "crf_iters",
    "crf_window": "crf_window",
    "se_radius": "se_radius",
    "input": "input_dir",
    "output": "output_dir",
    "checkpoint": "checkpoint",
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run config file (key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--workers", type=int, help="Images processed concurrently")
    common.add_argument("--working-size", type=int, help="Side of the square working resolution")
    return common


def _add_crf_flags(parser):
    parser.add_argument("--crf-omega1", type=float, help="Appearance kernel weight")
    parser.add_argument("--crf-omega2", type=float, help="Smoothness kernel weight")
    parser.add_argument("--crf-sigma-alpha", type=float, help="Appearance kernel position bandwidth")
    parser.add_argument("--crf-sigma-beta", type=float, help="Appearance kernel color bandwidth")
    parser.add_argument("--crf-sigma-gamma", type=float, help="Smoothness kernel position bandwidth")
    parser.add_argument("--crf-iters", type=int)
    parser.add_argument("--crf-window", type=int, help="Window radius, 0 for all pixel pairs")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="lesionseg", description="Lesion segmentation: train, infer, refine and score."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic dataset")
    synth.add_argument("--n", type=int, default=16)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("-o", "--output", help="Output directory (default: input_dir)")

    train = sub.add_parser("train", parents=[common], help="Fit the network")
    train.add_argument("-i", "--input", help="Directory of images and truth masks")
    train.add_argument("-o", "--output", help="Directory for the loss log and run config")
    train.add_argument("--checkpoint", help="Checkpoint to write")
    train.add_argument("--preset", choices=["desk", "full"])
    train.add_argument("--iterations", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--aux-loss", action="store_true", default=None)
    train.add_argument("--resume", help="Checkpoint to start from")
    train.add_argument("--loss-chart", help="Write an HTML loss curve here")

    infer = sub.add_parser("infer", parents=[common], help="Write probability maps")
    infer.add_argument("-i", "--input")
    infer.add_argument("-o", "--output")
    infer.add_argument("--checkpoint")

    refine = sub.add_parser("refine", parents=[common], help="Refine probability maps with the CRF")
    refine.add_argument("-i", "--input", help="Directory of source images")
    refine.add_argument("--probs", help="Directory of <stem>_prob.png maps (default: output_dir)")
    refine.add_argument("-o", "--output")
    _add_crf_flags(refine)

    post = sub.add_parser("postprocess", parents=[common], help="Binarize and clean maps")
    post.add_argument("--probs", help="Directory of <stem>_prob.png maps (default: output_dir)")
    post.add_argument("-o", "--output")
    post.add_argument("--se-radius", type=int)

    evaluate = sub.add_parser("eval", parents=[common], help="Score predicted masks")
    evaluate.add_argument("--pred", help="Directory of predicted masks (default: output_dir)")
    evaluate.add_argument("--truth", help="Directory of truth masks (default: input_dir)")
    evaluate.add_argument("--csv", help="Report path (default: <pred>/metrics.csv)")
    evaluate.add_argument("--chart", help="Write an HTML per-image Jaccard chart here")

    pipeline = sub.add_parser("pipeline", parents=[common], help="infer, refine, postprocess, save")
    pipeline.add_argument("-i", "--input")
    pipeline.add_argument("-o", "--output")
    pipeline.add_argument("--checkpoint")
    pipeline.add_argument("--skip-crf", action="store_true")
    pipeline.add_argument("--se-radius", type=int)
    pipeline.add_argument("--overlay", action="store_true", help="Also write <stem>_overlay.png")
    pipeline.add_argument("--eval", action="store_true", help="Score against truths in the input dir")
    _add_crf_flags(pipeline)

    return parser


def resolve_config(args) -> RunConfig:
    overrides = {
        field: getattr(args, dest)
        for dest, field in OVERRIDES.items()
        if getattr(args, dest, None) is not None
    }
    if args.config:
        return RunConfig.load(args.config, **overrides)
    if settings.DEFAULT_RUN_CONFIG.is_file():
        return RunConfig.load(settings.DEFAULT_RUN_CONFIG, **overrides)
    return RunConfig(**overrides)


def _map_images(fn: Callable, items: list, workers: int) -> list:
    """Apply fn to every item, keeping input order; undecodable images yield None."""

    def guarded(item):
        try:
            return fn(item)
        except ImageDecodeError as e:
            logger.warning(f"Skipping {e.path}: {e}")
            return None

    if workers <= 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


def _working_image(path, size: int):
    image = imaging.load_image(path)
    return image, imaging.resize(image, size, size)


def _load_prob(path, size: int) -> ProbabilityMap:
    prob = imaging.load_probability_map(path)
    working = imaging.resize(prob, size, size)
    return ProbabilityMap(working.values, source_size=prob.shape)


def _restore(prob: ProbabilityMap) -> ProbabilityMap:
    return imaging.resize(prob, *prob.source_size)


def cmd_synth(args, config: RunConfig) -> int:
    out_dir = args.output or config.input_dir
    generate_synthetic_dataset(args.n, args.size, config.seed, out_dir)
    return 0


def load_training_samples(index: DatasetIndex, size: int) -> List[TrainSample]:
    samples = []
    for stem, image_path, truth_path in index.require_truth().pairs():
        try:
            _, image = _working_image(image_path, size)
            truth = imaging.resize(imaging.load_mask(truth_path), size, size)
        except ImageDecodeError as e:
            logger.warning(f"Skipping {e.path}: {e}")
            continue
        samples.append(TrainSample(image, truth.bits.astype(np.float64), stem))
    return samples


def cmd_train(args, config: RunConfig) -> int:
    index = DatasetIndex.scan(config.input_dir)
    samples = load_training_samples(index, config.working_size)
    if not samples:
        raise DatasetError(f"No usable training samples in {config.input_dir}")

    initial = load_checkpoint(args.resume) if args.resume else None
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    state = fit(
        samples,
        config.sgd_config(),
        config.network_config(),
        initial_params=initial,
        log_path=out_dir / LOSS_LOG,
        progress=True,
    )

    checkpoint = Path(config.checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.params, checkpoint)
    config.save(out_dir / RUN_CONF)
    if args.loss_chart:
        plots.write_loss_chart(state.loss_history, args.loss_chart)
    logger.info(f"Checkpoint written to {checkpoint}")
    return 0


def cmd_infer(args, config: RunConfig) -> int:
    params = load_checkpoint(config.checkpoint)
    index = DatasetIndex.scan(config.input_dir)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(pair):
        stem, image_path, _ = pair
        image, work = _working_image(image_path, config.working_size)
        start = time.perf_counter()
        prob = infer_probability_map(params, work, source_size=image.shape[1:])
        elapsed = time.perf_counter() - start
        logger.debug(f"{stem}: inference {elapsed:.3f}s")
        imaging.save_probability_map(out_dir / prob_name(stem), _restore(prob))
        return elapsed

    timings = [t for t in _map_images(run, list(index.pairs()), config.workers) if t is not None]
    if timings:
        mean = sum(timings) / len(timings)
        logger.info(f"Inferred {len(timings)} maps, mean {mean:.3f}s per image ({1 / mean:.1f} FPS)")
    logger.info(f"Probability maps written to {out_dir}")
    return 0


def cmd_refine(args, config: RunConfig) -> int:
    params = config.crf_params()
    prob_dir = Path(args.probs or config.output_dir)
    index = DatasetIndex.scan(config.input_dir)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(pair):
        stem, image_path, _ = pair
        prob_path = prob_dir / prob_name(stem)
        if not prob_path.is_file():
            logger.warning(f"No probability map for {stem} in {prob_dir}")
            return None
        _, work = _working_image(image_path, config.working_size)
        prob = _load_prob(prob_path, config.working_size)
        refined = crf_refine(prob, work, params)
        imaging.save_probability_map(out_dir / prob_name(stem), _restore(refined))
        return stem

    done = [s for s in _map_images(run, list(index.pairs()), config.workers) if s]
    logger.info(f"Refined {len(done)} maps into {out_dir}")
    return 0


def prob_stems(prob_dir: Path) -> List[str]:
    suffix = prob_name("")
    return sorted(p.name[: -len(suffix)] for p in prob_dir.glob(f"*{suffix}"))


def cmd_postprocess(args, config: RunConfig) -> int:
    prob_dir = Path(args.probs or config.output_dir)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(stem):
        prob = _load_prob(prob_dir / prob_name(stem), config.working_size)
        mask = postprocess_pipeline(prob, config.se_radius)
        mask = imaging.resize(mask, *prob.source_size)
        imaging.save_mask(out_dir / truth_name(stem), mask)
        return stem

    done = [s for s in _map_images(run, prob_stems(prob_dir), config.workers) if s]
    logger.info(f"Wrote {len(done)} masks to {out_dir}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    pred_dir = Path(args.pred or config.output_dir)
    report = evaluate_dataset(pred_dir, args.truth or config.input_dir, config.workers)
    csv_path = Path(args.csv) if args.csv else pred_dir / METRICS_CSV
    report.to_csv(csv_path)
    print(report.to_table())
    if args.chart:
        plots.write_jaccard_chart(report, args.chart)
    logger.info(f"Report written to {csv_path}")
    return 0


def cmd_pipeline(args, config: RunConfig) -> int:
    params = load_checkpoint(config.checkpoint)
    crf_params = None if args.skip_crf else config.crf_params()
    index = DatasetIndex.scan(config.input_dir)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(pair):
        stem, image_path, _ = pair
        image, work = _working_image(image_path, config.working_size)
        prob = infer_probability_map(params, work, source_size=image.shape[1:])
        if crf_params is not None:
            prob = crf_refine(prob, work, crf_params)
        mask = postprocess_pipeline(prob, config.se_radius)
        mask = imaging.resize(mask, *prob.source_size)
        imaging.save_mask(out_dir / truth_name(stem), mask)
        if args.overlay:
            imaging.save_overlay(out_dir / overlay_name(stem), image, mask)
        return stem

    done = [s for s in _map_images(run, list(index.pairs()), config.workers) if s]
    logger.info(f"Pipeline wrote {len(done)} masks to {out_dir}")

    if args.eval:
        report = evaluate_dataset(out_dir, config.input_dir, config.workers)
        report.to_csv(out_dir / METRICS_CSV)
        print(report.to_table())
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "refine": cmd_refine,
    "postprocess": cmd_postprocess,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    settings.configure_logging(args.log_level)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (SegmentationError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"lesionseg {args.command}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
