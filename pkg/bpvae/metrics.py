"""Detection and reconstruction metrics.

Detection treats in-distribution (``id``) samples as the positive class and a
higher score (ELBO) as more in-distribution.
"""

import math
from typing import List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .config import SSIM_C1, SSIM_C2, SSIM_WINDOW
from .errors import ShapeError
from .models import HistogramBin, JointHistogramRow, ScoreSet


def _split_labels(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray]:
    positives, negatives = scores.scores("id"), scores.scores("ood")
    if positives.size == 0 or negatives.size == 0:
        raise ValueError("detection metrics need both id and ood scores")
    return positives, negatives


def auroc(scores: ScoreSet) -> float:
    """P(random id score > random ood score), ties counted half (Mann-Whitney U)."""
    positives, negatives = _split_labels(scores)
    ranks = rankdata(np.concatenate([positives, negatives]))
    n_pos, n_neg = positives.size, negatives.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: ScoreSet) -> float:
    """Average precision: sum over descending distinct thresholds of (delta recall) * precision."""
    positives, negatives = _split_labels(scores)
    values = np.concatenate([positives, negatives])
    is_pos = np.concatenate([np.ones(positives.size), np.zeros(negatives.size)])

    order = np.argsort(-values, kind="mergesort")
    values, is_pos = values[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(1.0 - is_pos)
    # last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(values)), values.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / positives.size
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(delta * precision))


def _check_pair(reference: np.ndarray, test: np.ndarray, op: str) -> Tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ShapeError(f"{op}: shape mismatch {reference.shape} vs {test.shape}")
    return reference, test


def mse(reference: np.ndarray, test: np.ndarray) -> float:
    reference, test = _check_pair(reference, test, "mse")
    return float(np.mean((reference - test) ** 2))


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """PSNR in dB for unit dynamic range; +inf for identical images."""
    return psnr_from_mse(mse(reference, test))


def psnr_from_mse(value: float) -> float:
    if value == 0:
        return math.inf
    return -10.0 * math.log10(value)


def _as_planes(images: np.ndarray) -> np.ndarray:
    """(H, W), (H, W, 1), (N, H, W) or (N, H, W, 1) -> (N, H, W)."""
    if images.ndim == 2:
        return images[None]
    if images.ndim == 3 and images.shape[-1] == 1:
        return images[None, ..., 0]
    if images.ndim == 4 and images.shape[-1] == 1:
        return images[..., 0]
    if images.ndim == 3:
        return images
    raise ShapeError(f"ssim: unsupported image shape {images.shape}")


def ssim(reference: np.ndarray, test: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every stride-1 uniform window and every image."""
    reference, test = _check_pair(reference, test, "ssim")
    x, y = _as_planes(reference), _as_planes(test)
    size = min(window, x.shape[1], x.shape[2])
    wx = sliding_window_view(x, (size, size), axis=(1, 2))
    wy = sliding_window_view(y, (size, size), axis=(1, 2))

    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    var_x = wx.var(axis=(-2, -1))
    var_y = wy.var(axis=(-2, -1))
    cov = (wx * wy).mean(axis=(-2, -1)) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    denominator = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(numerator / denominator))


def histogram(scores: ScoreSet, bins: int) -> List[HistogramBin]:
    """Equal-width bins over [min, max]; the last bin is closed on the right."""
    if bins < 1:
        raise ValueError("histogram: bins must be at least 1")
    counts, edges = np.histogram(scores.scores(), bins=bins)
    return [
        HistogramBin(bin_left=float(edges[i]), bin_right=float(edges[i + 1]), count=int(c))
        for i, c in enumerate(counts)
    ]


def joint_histogram(score_sets: Sequence[ScoreSet], bins: int) -> List[JointHistogramRow]:
    """Per-dataset counts over bin edges shared by all score sets."""
    if bins < 1:
        raise ValueError("histogram: bins must be at least 1")
    merged = ScoreSet.merge(*score_sets)
    _, edges = np.histogram(merged.scores(), bins=bins)
    rows: List[JointHistogramRow] = []
    for name in merged.dataset_names():
        counts, _ = np.histogram(merged.for_dataset(name).scores(), bins=edges)
        rows.extend(
            JointHistogramRow(dataset=name, bin_left=float(edges[i]), bin_right=float(edges[i + 1]), count=int(c))
            for i, c in enumerate(counts)
        )
    return rows
