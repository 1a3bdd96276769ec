"""Likelihood scoring and the simple-dataset selection procedure.

The single-sample ELBO under the basic prior stands in for log p(x).
"""

import asyncio
import math
from typing import List, Optional, Sequence

import numpy as np

from .config import DEFAULT_BASIC_SIGMA, SCORE_BATCH_SIZE
from .data import ImageDataset
from .errors import DivergenceError
from .logging_config import logger
from .models import (
    Architecture,
    Label,
    LikelihoodRatioReport,
    PriorSpec,
    ScoreSet,
    ScoreSummary,
    SelectionVerdict,
    TrainConfig,
)
from .vae import VaeModel, elbo, init_model, train


def _check_model(model: VaeModel) -> None:
    if not model.is_finite():
        raise ValueError("model parameters contain NaN or infinite values")


def _scoring_noise(model: VaeModel, count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((count, model.architecture.latent_dim)).astype(model.dtype)


def _score_rows(model: VaeModel, images: np.ndarray, noise: np.ndarray, start: int, stop: int, batch_size: int) -> np.ndarray:
    out = np.empty(stop - start, dtype=np.float64)
    for lo in range(start, stop, batch_size):
        hi = min(lo + batch_size, stop)
        values = elbo(model, images[lo:hi], noise[lo:hi])
        out[lo - start : hi - start] = values.data
    return out


def score_values(model: VaeModel, dataset: ImageDataset, seed: int = 0, batch_size: int = SCORE_BATCH_SIZE) -> np.ndarray:
    """Per-sample ELBOs as a float64 array, in dataset order."""
    _check_model(model)
    noise = _scoring_noise(model, len(dataset), seed)
    return _score_rows(model, dataset.images, noise, 0, len(dataset), batch_size)


def score_dataset(
    model: VaeModel,
    dataset: ImageDataset,
    seed: int = 0,
    label: Label = "id",
    batch_size: int = SCORE_BATCH_SIZE,
) -> ScoreSet:
    """Score every image with one reparameterization sample.

    Noise for the whole dataset is drawn up front from ``seed`` so results do
    not depend on batch size or sharding.
    """
    values = score_values(model, dataset, seed, batch_size)
    logger.debug(f"Scored {len(values)} samples from {dataset.name}")
    return ScoreSet.from_scores(values, label, dataset.name)


def _shard_bounds(count: int, shards: int, batch_size: int) -> List[tuple]:
    n_batches = math.ceil(count / batch_size)
    shards = max(1, min(shards, n_batches))
    per_shard = math.ceil(n_batches / shards)
    bounds = []
    for s in range(shards):
        lo = s * per_shard * batch_size
        hi = min((s + 1) * per_shard * batch_size, count)
        if lo < hi:
            bounds.append((lo, hi))
    return bounds


async def score_dataset_sharded(
    model: VaeModel,
    dataset: ImageDataset,
    seed: int = 0,
    label: Label = "id",
    shards: int = 4,
    batch_size: int = SCORE_BATCH_SIZE,
) -> ScoreSet:
    """Same result as score_dataset, computed over batch-aligned shards in worker threads."""
    if shards < 1:
        raise ValueError("shards must be at least 1")
    _check_model(model)
    noise = _scoring_noise(model, len(dataset), seed)
    bounds = _shard_bounds(len(dataset), shards, batch_size)
    logger.debug(f"Scoring {dataset.name} over {len(bounds)} shards")

    parts = await asyncio.gather(
        *(
            asyncio.to_thread(_score_rows, model, dataset.images, noise, lo, hi, batch_size)
            for lo, hi in bounds
        )
    )
    return ScoreSet.from_scores(np.concatenate(parts), label, dataset.name)


def summarize_scores(scores: ScoreSet) -> List[ScoreSummary]:
    summaries = []
    for name in scores.dataset_names():
        values = scores.for_dataset(name).scores()
        summaries.append(
            ScoreSummary(
                dataset=name,
                count=int(values.size),
                mean_elbo=float(np.mean(values)),
                median_elbo=float(np.median(values)),
                std_elbo=float(np.std(values)),
            )
        )
    return summaries


def likelihood_ratio_report(trained_scores: ScoreSet, test_scores: ScoreSet) -> LikelihoodRatioReport:
    """Compare test-sample likelihoods with training-sample likelihoods.

    Both conventions are reported: the mean-ELBO difference (test minus train)
    and the ratio of mean negative ELBOs. A ratio below 1 means the test
    samples look more likely than the data the model was trained on.
    """
    train_mean = float(np.mean(trained_scores.scores()))
    test_mean = float(np.mean(test_scores.scores()))
    numerator, denominator = -test_mean, -train_mean
    if denominator == 0:
        ratio = 1.0 if numerator == 0 else math.inf
    else:
        ratio = numerator / denominator
    return LikelihoodRatioReport(
        train_dataset=", ".join(trained_scores.dataset_names()),
        test_dataset=", ".join(test_scores.dataset_names()),
        train_mean_elbo=train_mean,
        test_mean_elbo=test_mean,
        difference=test_mean - train_mean,
        neg_elbo_ratio=ratio,
        flagged=ratio < 1.0,
    )


def _statistic(values: np.ndarray, statistic: str) -> float:
    return float(np.median(values) if statistic == "median" else np.mean(values))


def _self_trained_elbo(
    dataset: ImageDataset, config: TrainConfig, architecture: Architecture, prior: PriorSpec, statistic: str
) -> float:
    model = init_model(architecture, prior, seed=config.seed)
    train(model, dataset, [], config)
    return _statistic(score_values(model, dataset, seed=config.seed), statistic)


def select_simple(
    basic: ImageDataset,
    candidates: Sequence[ImageDataset],
    config: TrainConfig,
    architecture: Optional[Architecture] = None,
    statistic: str = "mean",
    prior: Optional[PriorSpec] = None,
) -> List[SelectionVerdict]:
    """Decide which candidates are simple relative to ``basic``.

    A plain VAE is trained on every dataset under the same config; a candidate
    is simple iff its self-trained training-set ELBO statistic is strictly
    greater than the basic dataset's.
    """
    if not candidates:
        raise ValueError("select_simple needs at least one candidate dataset")
    if statistic not in ("mean", "median"):
        raise ValueError(f"unknown statistic {statistic!r}; expected 'mean' or 'median'")
    architecture = architecture or Architecture()
    prior = prior or PriorSpec(sigma=DEFAULT_BASIC_SIGMA)

    try:
        basic_value: Optional[float] = _self_trained_elbo(basic, config, architecture, prior, statistic)
        basic_failure = None
    except DivergenceError as e:
        logger.warning(f"Basic dataset {basic.name} diverged: {e}")
        basic_value, basic_failure = None, f"basic dataset: {e}"

    verdicts: List[SelectionVerdict] = []
    for candidate in candidates:
        if basic_value is None:
            verdicts.append(
                SelectionVerdict(candidate=candidate.name, statistic=statistic, verdict="indeterminate", reason=basic_failure)
            )
            continue
        try:
            value = _self_trained_elbo(candidate, config, architecture, prior, statistic)
        except DivergenceError as e:
            logger.warning(f"Candidate {candidate.name} diverged: {e}")
            verdicts.append(
                SelectionVerdict(
                    candidate=candidate.name,
                    statistic=statistic,
                    basic_self_elbo=basic_value,
                    verdict="indeterminate",
                    reason=str(e),
                )
            )
            continue
        verdicts.append(
            SelectionVerdict(
                candidate=candidate.name,
                statistic=statistic,
                basic_self_elbo=basic_value,
                candidate_self_elbo=value,
                verdict="simple" if value > basic_value else "not-simple",
            )
        )
        logger.info(f"Candidate {candidate.name}: {statistic} self-ELBO {value:.4f} vs basic {basic_value:.4f}")
    return verdicts
