"""Command-line entry points.

Verbs: train, detect, reconstruct, select-simple, report, sample. Every verb
takes --config, --seed, --out and --limit. Each prints one JSON result on stdout. Failures print a single JSON error line on stderr
and exit with 2 (config/usage), 3 (data or checkpoint) or 4 (divergence).
"""

import argparse
import asyncio
import dataclasses
import json
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (
    DEFAULT_BINS,
    DEFAULT_OUT_DIR,
    DEFAULT_SEED,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_DIVERGENCE,
    EXIT_OK,
    SCORE_BATCH_SIZE,
    ensure_dirs,
    read_flat_config,
)
from .data import ImageDataset, resolve_dataset
from .errors import CheckpointError, ConfigError, DataFormatError, DivergenceError, ShapeError
from .logging_config import logger, setup_logging
from .metrics import auprc, auroc, joint_histogram, mse, psnr_from_mse, ssim
from .models import (
    DetectReport,
    Label,
    MetricsReport,
    ReconstructReport,
    RunConfig,
    SampleReport,
    ScoreSet,
    SelectReport,
    SummaryReport,
    TrainReport,
    flat_keys,
    validation_message,
)
from .reports import write_csv, write_pgm
from .scoring import likelihood_ratio_report, score_dataset_sharded, select_simple, summarize_scores
from .vae import generate, init_model, reconstruct, train

CHECKPOINT_NAME = "checkpoint.bpvae"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> Any:  # type: ignore[override]
        raise ConfigError(f"usage: {message}")


# Configuration


def _read_config_file(args: argparse.Namespace) -> Dict[str, Any]:
    values: Dict[str, Any] = read_flat_config(args.config) if getattr(args, "config", None) else {}
    unknown = sorted(set(values) - set(flat_keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return values


def build_run_config(args: argparse.Namespace, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Config file values, then dotted-key flags, then the short flags."""
    values = _read_config_file(args)

    for key in flat_keys():
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if getattr(args, "seed", None) is not None:
        values["train.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        values["output_dir"] = args.out
    if getattr(args, "limit", None) is not None:
        values["limit"] = args.limit
    values.update(overrides or {})
    return RunConfig.from_flat(values)


_SHORT_FLAGS = (("train.seed", "seed", int), ("output_dir", "out", str), ("limit", "limit", int))


def apply_config_file(args: argparse.Namespace) -> None:
    """Fill ``--seed``, ``--out`` and ``--limit`` from the config file for the checkpoint verbs.

    Flags given on the command line win; the file's other keys are validated
    but describe training and are not used here.
    """
    values = _read_config_file(args)
    for key, attr, cast in _SHORT_FLAGS:
        if getattr(args, attr) is not None or key not in values:
            continue
        try:
            setattr(args, attr, cast(values[key]))
        except ValueError:
            raise ConfigError(f"config key {key}: expected {cast.__name__}, got {values[key]!r}") from None


def _out_dir(args: argparse.Namespace) -> str:
    path = args.out or DEFAULT_OUT_DIR
    ensure_dirs(path)
    return path


def _seed(args: argparse.Namespace) -> int:
    return DEFAULT_SEED if args.seed is None else args.seed


def _load_model(path: str) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    logger.info(f"Loaded {checkpoint.model.mode} checkpoint from {path}")
    return checkpoint


def _check_image_size(checkpoint: Checkpoint, dataset: ImageDataset) -> None:
    size = checkpoint.model.architecture.image_size
    if dataset.images.shape[1:3] != (size, size):
        raise ShapeError(
            f"dataset {dataset.name} has {dataset.images.shape[1:3]} images, checkpoint expects {(size, size)}"
        )


def _score(checkpoint: Checkpoint, dataset: ImageDataset, seed: int, label: Label, shards: int) -> ScoreSet:
    _check_image_size(checkpoint, dataset)
    return asyncio.run(
        score_dataset_sharded(checkpoint.model, dataset, seed=seed, label=label, shards=shards)
    )


# Commands


def cmd_train(config: RunConfig) -> TrainReport:
    basic = resolve_dataset(config.basic, "train", config.limit)
    simples = [resolve_dataset(ref, "train", config.limit) for ref in config.simples]
    model = init_model(
        config.model,
        config.basic_prior(),
        config.simple_priors(),
        seed=config.train.seed,
        simple_branch_prior=config.priors.simple_branch_prior,
    )
    logger.info(f"Training {model.mode} with {model.parameter_count()} parameters")
    result = train(model, basic, simples, config.train)

    ensure_dirs(config.output_dir)
    checkpoint_path = os.path.join(config.output_dir, CHECKPOINT_NAME)
    loss_path = os.path.join(config.output_dir, "loss.csv")
    sha = save_checkpoint(checkpoint_path, model, config.train, result.final_loss)
    write_csv(loss_path, ["epoch", "loss"], enumerate(result.epoch_losses))
    return TrainReport(
        checkpoint=checkpoint_path,
        loss_csv=loss_path,
        epochs=len(result.epoch_losses),
        final_loss=result.final_loss,
        sha256=sha,
    )


def cmd_detect(
    checkpoint_path: str,
    id_ref: str,
    ood_ref: str,
    out_dir: str,
    bins: int = DEFAULT_BINS,
    seed: int = DEFAULT_SEED,
    limit: Optional[int] = None,
    shards: int = 1,
) -> DetectReport:
    """Score an in-distribution and an OOD dataset and report detection metrics."""
    checkpoint = _load_model(checkpoint_path)
    id_data = resolve_dataset(id_ref, "test", limit)
    ood_data = resolve_dataset(ood_ref, "test", limit)
    if ood_data.name == id_data.name:
        ood_data = dataclasses.replace(ood_data, name=f"{ood_data.name}-ood")

    id_scores = _score(checkpoint, id_data, seed, "id", shards)
    ood_scores = _score(checkpoint, ood_data, seed, "ood", shards)
    scores = ScoreSet.merge(id_scores, ood_scores)
    report = {
        "auroc": auroc(scores),
        "auprc": auprc(scores),
        "mean_elbo_id": float(np.mean(id_scores.scores())),
        "mean_elbo_ood": float(np.mean(ood_scores.scores())),
    }

    metrics_csv = write_csv(os.path.join(out_dir, "metrics.csv"), ["metric", "value"], report.items())
    histogram_csv = write_csv(
        os.path.join(out_dir, "histogram.csv"),
        ["dataset", "bin_left", "bin_right", "count"],
        ([r.dataset, r.bin_left, r.bin_right, r.count] for r in joint_histogram([id_scores, ood_scores], bins)),
    )
    scores_csv = write_csv(
        os.path.join(out_dir, "scores.csv"),
        ["dataset", "label", "score"],
        ([e.dataset_name, e.label, e.score] for e in scores.entries),
    )
    logger.info(f"Detection AUROC {report['auroc']:.4f} ({id_data.name} vs {ood_data.name})")
    return DetectReport(metrics_csv=metrics_csv, histogram_csv=histogram_csv, scores_csv=scores_csv, **report)


def cmd_reconstruct(
    checkpoint_path: str, dataset_ref: str, out_dir: str, count: int = 16, limit: Optional[int] = None
) -> ReconstructReport:
    """Reconstruct the first ``count`` images from posterior means; dump PGM pairs."""
    checkpoint = _load_model(checkpoint_path)
    dataset = resolve_dataset(dataset_ref, "test", limit)
    _check_image_size(checkpoint, dataset)
    if not 1 <= count <= len(dataset):
        raise ConfigError(f"count must be between 1 and the dataset size {len(dataset)}, got {count}")

    originals = dataset.images[:count]
    rebuilt = np.concatenate(
        [
            reconstruct(checkpoint.model, originals[lo : lo + SCORE_BATCH_SIZE])
            for lo in range(0, count, SCORE_BATCH_SIZE)
        ]
    )
    error = mse(originals, rebuilt)
    metrics = MetricsReport(mse=error, psnr_db=psnr_from_mse(error), ssim=ssim(originals, rebuilt))

    image_dir = os.path.join(out_dir, "reconstructions")
    for i in range(count):
        write_pgm(os.path.join(image_dir, f"{i:04d}_original.pgm"), originals[i])
        write_pgm(os.path.join(image_dir, f"{i:04d}_reconstruction.pgm"), rebuilt[i])
    metrics_csv = write_csv(
        os.path.join(out_dir, "reconstruction.csv"),
        ["metric", "value"],
        [("mse", metrics.mse), ("psnr_db", metrics.psnr_db), ("ssim", metrics.ssim)],
    )
    return ReconstructReport(metrics_csv=metrics_csv, image_dir=image_dir, count=count, metrics=metrics)


def cmd_select_simple(config: RunConfig, candidate_refs: Sequence[str], statistic: str = "mean") -> SelectReport:
    if not candidate_refs:
        raise ConfigError("select-simple needs at least one --candidate")
    basic = resolve_dataset(config.basic, "train", config.limit)
    candidates = [resolve_dataset(ref, "train", config.limit) for ref in candidate_refs]
    verdicts = select_simple(
        basic, candidates, config.train, config.model, statistic=statistic, prior=config.basic_prior()
    )

    ensure_dirs(config.output_dir)
    verdict_csv = write_csv(
        os.path.join(config.output_dir, "verdicts.csv"),
        ["candidate", "statistic", "candidate_self_elbo", "basic_self_elbo", "verdict", "reason"],
        (
            [
                v.candidate,
                v.statistic,
                "" if v.candidate_self_elbo is None else v.candidate_self_elbo,
                "" if v.basic_self_elbo is None else v.basic_self_elbo,
                v.verdict,
                v.reason or "",
            ]
            for v in verdicts
        ),
    )
    return SelectReport(verdict_csv=verdict_csv, verdicts=verdicts)


def cmd_report(
    checkpoint_path: str,
    dataset_refs: Sequence[str],
    out_dir: str,
    train_ref: Optional[str] = None,
    bins: int = DEFAULT_BINS,
    seed: int = DEFAULT_SEED,
    limit: Optional[int] = None,
    shards: int = 1,
) -> SummaryReport:
    """Score one model against many datasets: summaries, a joint histogram and train/test ratios."""
    if not dataset_refs:
        raise ConfigError("report needs at least one --dataset")
    checkpoint = _load_model(checkpoint_path)

    train_scores = None
    score_sets: List[ScoreSet] = []
    if train_ref:
        train_scores = _score(checkpoint, resolve_dataset(train_ref, "train", limit), seed, "id", shards)
        score_sets.append(train_scores)
    test_sets = [
        _score(checkpoint, resolve_dataset(ref, "test", limit), seed, "ood", shards) for ref in dataset_refs
    ]
    score_sets.extend(test_sets)

    summaries = summarize_scores(ScoreSet.merge(*score_sets))
    summary_csv = write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["dataset", "count", "mean_elbo", "median_elbo", "std_elbo"],
        ([s.dataset, s.count, s.mean_elbo, s.median_elbo, s.std_elbo] for s in summaries),
    )
    histogram_csv = write_csv(
        os.path.join(out_dir, "report_histogram.csv"),
        ["dataset", "bin_left", "bin_right", "count"],
        ([r.dataset, r.bin_left, r.bin_right, r.count] for r in joint_histogram(score_sets, bins)),
    )

    ratios = []
    ratio_csv = None
    if train_scores is not None:
        ratios = [likelihood_ratio_report(train_scores, test) for test in test_sets]
        ratio_csv = write_csv(
            os.path.join(out_dir, "ratios.csv"),
            [
                "train_dataset",
                "test_dataset",
                "train_mean_elbo",
                "test_mean_elbo",
                "difference",
                "neg_elbo_ratio",
                "flagged",
            ],
            (
                [
                    r.train_dataset,
                    r.test_dataset,
                    r.train_mean_elbo,
                    r.test_mean_elbo,
                    r.difference,
                    r.neg_elbo_ratio,
                    str(r.flagged).lower(),
                ]
                for r in ratios
            ),
        )
    return SummaryReport(
        summary_csv=summary_csv, histogram_csv=histogram_csv, ratio_csv=ratio_csv, summaries=summaries, ratios=ratios
    )


def cmd_sample(checkpoint_path: str, out_dir: str, count: int = 16, prior_index: int = 0, seed: int = DEFAULT_SEED) -> SampleReport:
    """Decode draws from one prior and dump them as PGM files."""
    if count < 1:
        raise ConfigError("count must be at least 1")
    checkpoint = _load_model(checkpoint_path)
    model = checkpoint.model
    if not 0 <= prior_index < len(model.priors()):
        raise ConfigError(f"prior index {prior_index} out of range; the model has {len(model.priors())} priors")
    images = generate(model, count, seed=seed, prior_index=prior_index)

    image_dir = os.path.join(out_dir, "samples")
    for i, image in enumerate(images):
        write_pgm(os.path.join(image_dir, f"prior{prior_index}_{i:04d}.pgm"), image)
    return SampleReport(image_dir=image_dir, count=count, prior=model.priors()[prior_index])


# Argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (train.seed for training verbs)")
    parser.add_argument("--out", default=None, help="Output directory")
    parser.add_argument("--limit", type=int, default=None, help="Use at most this many images per dataset")
    parser.add_argument("--log-level", default="WARNING", help="Log level for stderr")
    parser.add_argument("--log-format", choices=["json", "text"], default="json")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    for key in flat_keys():
        if key in ("output_dir", "limit"):
            continue
        parser.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bpvae", description="BPVAE training and likelihood-based OOD detection")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="Train a VAE or BPVAE and write a checkpoint")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("detect", help="AUROC/AUPRC of an in-distribution vs an OOD dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id", dest="id_dataset", required=True, help="In-distribution dataset reference")
    p.add_argument("--ood", dest="ood_dataset", required=True, help="Out-of-distribution dataset reference")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--shards", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("reconstruct", help="MSE/PSNR/SSIM of reconstructions plus PGM dumps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--count", type=int, default=16)
    _add_common(p)

    p = sub.add_parser("select-simple", help="Decide which candidate datasets are simple relative to the basic one")
    _add_config_flags(p)
    p.add_argument("--candidate", action="append", default=[], help="Candidate dataset reference (repeatable)")
    p.add_argument("--statistic", choices=["mean", "median"], default="mean")
    _add_common(p)

    p = sub.add_parser("report", help="Likelihood summaries and histograms over several datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", action="append", default=[], help="Test dataset reference (repeatable)")
    p.add_argument("--train-dataset", default=None, help="Training dataset, enables likelihood ratios")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--shards", type=int, default=1)
    _add_common(p)

    p = sub.add_parser("sample", help="Decode samples drawn from one of the model's priors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--prior-index", type=int, default=0, help="0 = basic prior, k = simple prior k")
    _add_common(p)
    return parser


def _dispatch(args: argparse.Namespace) -> BaseModel:
    verb = args.verb
    if verb == "train":
        return cmd_train(build_run_config(args))
    if verb == "select-simple":
        config = build_run_config(args, {"mode": "vae", "simples": []})
        return cmd_select_simple(config, args.candidate, args.statistic)
    apply_config_file(args)
    if verb == "detect":
        return cmd_detect(
            args.checkpoint, args.id_dataset, args.ood_dataset, _out_dir(args),
            bins=args.bins, seed=_seed(args), limit=args.limit, shards=args.shards,
        )
    if verb == "reconstruct":
        return cmd_reconstruct(args.checkpoint, args.dataset, _out_dir(args), count=args.count, limit=args.limit)
    if verb == "report":
        return cmd_report(
            args.checkpoint, args.dataset, _out_dir(args), train_ref=args.train_dataset,
            bins=args.bins, seed=_seed(args), limit=args.limit, shards=args.shards,
        )
    if verb == "sample":
        return cmd_sample(args.checkpoint, _out_dir(args), count=args.count, prior_index=args.prior_index, seed=_seed(args))
    raise ConfigError(f"unknown command {verb!r}")


_EXIT_KINDS: List[tuple] = [
    (DivergenceError, "divergence", EXIT_DIVERGENCE),
    ((DataFormatError, CheckpointError, FileNotFoundError, ShapeError), "data", EXIT_DATA),
    ((ConfigError, ValueError), "config", EXIT_CONFIG),
]


def _fail(exc: BaseException) -> int:
    message = validation_message(exc) if isinstance(exc, ValidationError) else str(exc)
    for types, kind, code in _EXIT_KINDS:
        if isinstance(exc, types):
            break
    else:  # pragma: no cover
        raise exc
    print(json.dumps({"error": kind, "exit_code": code, "message": " ".join(message.split())}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        return _fail(e)
    setup_logging(level=args.log_level, format_type=args.log_format)

    try:
        result = _dispatch(args)
    except (DivergenceError, DataFormatError, CheckpointError, FileNotFoundError, ValueError) as e:
        logger.debug(f"{args.verb} failed", exc_info=True)
        return _fail(e)

    print(result.model_dump_json(indent=2))
    return EXIT_OK
