"""Segmentation metrics: confusion matrix, global/mean accuracy, boundary F1
(bfscore), IoU, frequency-weighted IoU and per-image scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataError, DomainError

BF_TOLERANCE_FRACTION = 0.0075


def _nanmean(values) -> float:
    """Mean of the non-NaN entries; exactly rounded so image order never matters."""
    vals = [float(v) for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


@dataclass
class ConfusionMatrix:
    """``P[a, b]`` = number of pixels with ground truth ``a`` predicted as ``b``."""

    num_classes: int = 4
    P: np.ndarray = None

    def __post_init__(self):
        if self.P is None:
            self.P = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def M(self) -> np.ndarray:
        """Ground-truth pixel count per class (row sums)."""
        return self.P.sum(axis=1)

    @property
    def H(self) -> np.ndarray:
        """Predicted pixel count per class (column sums)."""
        return self.P.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.P.sum())

    def row_normalized(self) -> np.ndarray:
        m = self.M.astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(m[:, None] > 0, self.P / m[:, None], np.nan)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.P.copy())


def _check_pair(pred: np.ndarray, truth: np.ndarray, n: int) -> None:
    if pred.shape != truth.shape:
        raise DataError(f"prediction extents {pred.shape} differ from truth {truth.shape}")
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= n):
            raise DataError(f"{name} labels must lie in 0..{n - 1}")


def accumulate_confusion(pred: np.ndarray, truth: np.ndarray, acc: ConfusionMatrix | None = None) -> ConfusionMatrix:
    """Add the pixel pairs of one prediction to ``acc`` (a new matrix if omitted)."""
    acc = ConfusionMatrix() if acc is None else acc
    n = acc.num_classes
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_pair(pred, truth, n)
    idx = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    acc.P += np.bincount(idx, minlength=n * n).reshape(n, n)
    return acc


def accuracies(cm: ConfusionMatrix) -> tuple[float, float, np.ndarray]:
    """Returns ``(gAcc, aAcc, per_class)``; absent classes are NaN and skipped by aAcc."""
    total = cm.total
    if total == 0:
        raise DomainError("confusion matrix is empty")
    diag = np.diag(cm.P).astype(np.float64)
    m = cm.M
    g_acc = float(diag.sum() / total)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(m > 0, diag / m, np.nan)
    a_acc = float(np.mean(per_class[m > 0]))
    return g_acc, a_acc, per_class


def iou_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float, float]:
    """Returns ``(per_class IoU, mean IoU, wIoU)``.

    Classes with an empty union are NaN and excluded from the mean. wIoU weights
    each class IoU by its ground-truth pixel count.
    """
    total = cm.total
    if total == 0:
        raise DomainError("confusion matrix is empty")
    diag = np.diag(cm.P).astype(np.float64)
    union = cm.M + cm.H - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, diag / union, np.nan)
    mean_iou = float(np.mean(iou[union > 0]))
    weighted = np.where(cm.M > 0, cm.M * np.nan_to_num(iou), 0.0)
    return iou, mean_iou, float(weighted.sum() / total)


# ---------------------------------------------------------------------------
# boundaries


def extract_boundary(labels: np.ndarray, cls: int) -> np.ndarray:
    """Boolean mask of pixels of ``cls`` with a 4-neighbor of a different label.

    Neighbors outside the image are ignored, so the frame alone never creates
    boundary.
    """
    labels = np.asarray(labels)
    mask = labels == cls
    edge = np.zeros_like(mask)
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    edge[:-1, :] |= labels[:-1, :] != labels[1:, :]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    return mask & edge


def auto_tolerance(shape: tuple[int, int]) -> float:
    """Distance tolerance of 0.75% of the image diagonal."""
    h, w = shape
    return BF_TOLERANCE_FRACTION * math.hypot(h, w)


def _within(src: np.ndarray, target: np.ndarray, tol: float) -> int:
    """Number of ``src`` pixels whose Euclidean distance to ``target`` is < tol."""
    dist = distance_transform_edt(~target)
    return int(np.count_nonzero(dist[src] < tol))


def bfscore(pred: np.ndarray, truth: np.ndarray, tolerance: float | str = "auto",
            num_classes: int = 4) -> tuple[np.ndarray, float]:
    """Per-class boundary F1 and its mean over defined classes.

    A class whose boundary is empty in both maps is undefined (NaN) and skipped;
    a class with exactly one empty boundary scores 0. The image mean is NaN
    when no class is defined.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_pair(pred, truth, num_classes)
    tol = auto_tolerance(truth.shape) if tolerance == "auto" else float(tolerance)
    scores = np.full(num_classes, np.nan)
    for o in range(num_classes):
        bp = extract_boundary(pred, o)
        bg = extract_boundary(truth, o)
        n_p, n_g = int(bp.sum()), int(bg.sum())
        if n_p == 0 and n_g == 0:
            continue
        if n_p == 0 or n_g == 0:
            scores[o] = 0.0
            continue
        precision = _within(bp, bg, tol) / n_p
        recall = _within(bg, bp, tol) / n_g
        s = precision + recall
        scores[o] = 0.0 if s == 0 else 2.0 * precision * recall / s
    defined = ~np.isnan(scores)
    mean = float(scores[defined].mean()) if defined.any() else math.nan
    return scores, mean


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageScores:
    g_acc: float
    a_acc: float
    bfscore: float
    class_accuracy: np.ndarray
    class_bfscore: np.ndarray
    class_iou: np.ndarray
    scar_truth: int
    scar_true_positive: int
    scar_predicted: int


@dataclass
class MetricsReport:
    g_acc: float
    a_acc: float
    mean_iou: float
    w_iou: float
    bfscore: float
    class_accuracy: np.ndarray
    class_bfscore: np.ndarray
    class_iou: np.ndarray
    confusion: ConfusionMatrix
    images: list[ImageScores] = field(default_factory=list)
    tolerance: float | str = "auto"

    @property
    def per_image_means(self) -> dict[str, float]:
        return {
            "g_acc": _nanmean(i.g_acc for i in self.images),
            "a_acc": _nanmean(i.a_acc for i in self.images),
            "bfscore": _nanmean(i.bfscore for i in self.images),
        }

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, (np.integer,)):
                return int(v)
            if isinstance(v, (np.floating,)):
                return clean(float(v))
            return v

        return {
            "schema": 1,
            "global_accuracy": clean(self.g_acc),
            "mean_accuracy": clean(self.a_acc),
            "mean_iou": clean(self.mean_iou),
            "weighted_iou": clean(self.w_iou),
            "bfscore": clean(self.bfscore),
            "class_accuracy": clean(self.class_accuracy),
            "class_bfscore": clean(self.class_bfscore),
            "class_iou": clean(self.class_iou),
            "confusion": self.confusion.P.tolist(),
            "confusion_row_normalized": clean(self.confusion.row_normalized()),
            "per_image_means": {k: clean(v) for k, v in self.per_image_means.items()},
            "tolerance": self.tolerance,
            "num_images": len(self.images),
        }


def image_scores(pred: np.ndarray, truth: np.ndarray, tolerance: float | str = "auto",
                 num_classes: int = 4, scar: int = 3) -> tuple[ImageScores, ConfusionMatrix]:
    cm = accumulate_confusion(pred, truth, ConfusionMatrix(num_classes))
    g, a, per = accuracies(cm)
    iou, _, _ = iou_scores(cm)
    bf_cls, bf = bfscore(pred, truth, tolerance, num_classes)
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return ImageScores(
        g_acc=g, a_acc=a, bfscore=bf, class_accuracy=per, class_bfscore=bf_cls, class_iou=iou,
        scar_truth=int(np.count_nonzero(truth == scar)),
        scar_true_positive=int(np.count_nonzero((truth == scar) & (pred == scar))),
        scar_predicted=int(np.count_nonzero(pred == scar)),
    ), cm


def per_image_scores(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                     tolerance: float | str = "auto", num_classes: int = 4) -> MetricsReport:
    """Score every image and pool the dataset.

    Dataset accuracy and IoU come from the pooled confusion matrix; dataset
    bfscore (overall and per class) is the mean of the per-image values.
    """
    preds = list(preds)
    truths = list(truths)
    if not preds:
        raise DomainError("per_image_scores needs at least one image")
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions for {len(truths)} ground truths")
    pooled = ConfusionMatrix(num_classes)
    images = []
    for p, t in zip(preds, truths):
        s, cm = image_scores(p, t, tolerance, num_classes)
        pooled.P += cm.P
        images.append(s)
    g, a, per = accuracies(pooled)
    iou, miou, wiou = iou_scores(pooled)
    bf = _nanmean(s.bfscore for s in images)
    class_bf = np.array([_nanmean(s.class_bfscore[c] for s in images) for c in range(num_classes)])
    return MetricsReport(g, a, miou, wiou, bf, per, class_bf, iou, pooled, images, tolerance)
