"""Voxel-wise cross-entropy, mean soft Dice loss, and hard Dice metrics.

Both losses take softmax scores of shape (C, D, H, W) and 0-based integer
labels of shape (D, H, W), and are composed from tape primitives so their
gradients come out of ``Tensor.backward``.
"""
from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, Tensor

LOG_FLOOR = 1e-12


def _check(scores: Tensor, labels: np.ndarray) -> int:
    if scores.ndim != labels.ndim + 1 or scores.shape[1:] != labels.shape:
        raise ShapeError(f"scores {scores.shape} do not match labels {labels.shape}")
    c = scores.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    return c


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    np.put_along_axis(out, labels[None].astype(np.intp), 1, axis=0)
    return out


def cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    """-(1/N) sum_n log F_{y_n}(x_n), with log clamped at ``LOG_FLOOR``."""
    c = _check(scores, labels)
    n = labels.size
    target = Tensor(one_hot(labels, c, scores.dtype))
    return -((target * scores.clamp_min(LOG_FLOOR).log()).sum() / n)


def present_classes(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.flatnonzero(np.bincount(labels.ravel(), minlength=num_classes)[:num_classes])


def dice_loss(scores: Tensor, labels: np.ndarray, active_classes=None, smooth: float = 0.0) -> Tensor:
    """1 - mean over active classes of 2 sum(d F) / (sum d^2 + sum F^2).

    ``active_classes`` defaults to the classes present in ``labels``; other
    channels receive no gradient. ``smooth > 0`` adds a constant to numerator
    and denominator and, with ``active_classes='all'``, keeps every class.
    """
    c = _check(scores, labels)
    if active_classes is None:
        active = present_classes(labels, c)
    elif isinstance(active_classes, str) and active_classes == "all":
        active = np.arange(c)
    else:
        active = np.asarray(active_classes, dtype=np.intp)
    if active.size == 0:
        raise ValueError("dice loss needs at least one active class")
    target = one_hot(labels, c, scores.dtype)[active]
    f = scores.take(active, axis=0)
    axes = tuple(range(1, scores.ndim))
    t = Tensor(target)
    num = (t * f).sum(axis=axes) * 2.0
    den = f.square().sum(axis=axes) + Tensor(np.square(target).sum(axis=axes))
    if smooth:
        num = num + smooth
        den = den + smooth
    per_class = num / den
    return 1.0 - per_class.sum() / active.size


def check_loss(loss: Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    return value


# ----------------------------------------------------------------------
# hard metrics


def dcs_metric(pred: np.ndarray, truth: np.ndarray, c: int) -> float:
    """2|P & T| / (|P| + |T|) for class ``c``; 1.0 when the class is absent from both."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p = pred == c
    t = truth == c
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def per_class_dcs(pred: np.ndarray, truth: np.ndarray, classes=None) -> dict[int, float]:
    if classes is None:
        classes = np.unique(truth)
    return {int(c): dcs_metric(pred, truth, int(c)) for c in classes}


def mean_dcs(pred: np.ndarray, truth: np.ndarray) -> float:
    """Hard DCS averaged over the classes present in ``truth``."""
    scores = per_class_dcs(pred, truth)
    return float(np.mean(list(scores.values())))


def voxel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pred == truth))
