"""Class-frequency statistics, median-frequency class weights and the weighted
pixel-wise cross-entropy used for training."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, DomainError
from .kernels import softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrequencyVector:
    counts: np.ndarray        # integer pixel counts per class
    frequencies: np.ndarray   # counts / total


def class_frequencies(labels: Iterable[np.ndarray], num_classes: int = 4) -> FrequencyVector:
    """Pixel counts and normalized frequencies per class over a collection of label maps."""
    counts = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for lab in labels:
        seen = True
        lab = np.asarray(lab)
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise DataError(f"label values must lie in 0..{num_classes - 1}")
        counts += np.bincount(lab.ravel().astype(np.int64), minlength=num_classes)
    if not seen:
        raise DomainError("class_frequencies needs at least one label map")
    total = counts.sum()
    if total == 0:
        raise DomainError("label collection contains no pixels")
    return FrequencyVector(counts, counts / total)


def median_frequency_weights(freq: FrequencyVector | np.ndarray) -> np.ndarray:
    """``W_i = median(F) / F_i``.

    The median is taken over all classes (mean of the two middle values for an
    even count). A class with zero frequency gets the largest defined weight and
    a warning is logged.
    """
    f = np.asarray(freq.frequencies if isinstance(freq, FrequencyVector) else freq, dtype=np.float64)
    if np.any(f < 0) or not np.any(f > 0):
        raise DomainError("frequencies must be non-negative with at least one positive entry")
    med = float(np.median(f))
    weights = np.empty_like(f)
    present = f > 0
    weights[present] = med / f[present]
    if not present.all():
        absent = np.flatnonzero(~present).tolist()
        log.warning("classes %s absent from the data; assigning the maximum weight", absent)
        weights[~present] = weights[present].max()
    return weights


def weighted_cross_entropy(
    scores: np.ndarray, truth: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy normalized by total pixel weight.

    ``loss = sum_z W[t_z] * -log softmax(s_z)[t_z] / sum_z W[t_z]``

    Returns ``(loss, d_loss/d_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    n, c, h, w = scores.shape
    if truth.shape != (n, h, w):
        raise DataError(f"truth shape {truth.shape} does not match scores {scores.shape}")
    if truth.min() < 0 or truth.max() >= c:
        raise DataError(f"truth labels must lie in 0..{c - 1}")
    weights = np.asarray(weights, dtype=np.float64)
    t = truth.astype(np.int64)
    z = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    nll = log_norm - picked
    pw = weights[t]
    total = pw.sum()
    if total <= 0:
        raise DomainError("total pixel weight must be positive")
    loss = float((pw * nll).sum() / total)
    grad = softmax(scores, axis=1)
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1)
    grad *= (pw / total)[:, None]
    return loss, grad
