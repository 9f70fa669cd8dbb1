"""Numpy task metrics shared by exploration, training and evaluation."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import ModelConfig, unpatchify


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return math.sqrt(float(np.sum(d * d)) * (1.0 / d.size))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("accuracy needs equal, non-empty prediction and label lists")
    return float(np.mean(preds == labels))


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels of true class t predicted as p."""
    pred, truth = np.asarray(pred).reshape(-1), np.asarray(truth).reshape(-1)
    if pred.size == 0:
        raise ValueError("empty segmentation input")
    if pred.shape != truth.shape:
        raise ValueError("prediction and label grids differ in size")
    if pred.max() >= num_classes or truth.max() >= num_classes or min(pred.min(), truth.min()) < 0:
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def segmentation_metrics(preds, labels, num_classes: int) -> tuple[float, float, float]:
    """(PA, mPA, IoU) accumulated over all grids.

    mPA averages per-class recall over classes present in the ground truth;
    IoU averages over classes present in truth or prediction.
    """
    if isinstance(preds, np.ndarray) and preds.ndim == 2:
        preds, labels = [preds], [labels]
    if len(preds) == 0:
        raise ValueError("empty segmentation input")
    cm = sum(confusion_matrix(p, t, num_classes) for p, t in zip(preds, labels))
    tp = np.diag(cm).astype(np.float64)
    truth_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    union = truth_count + pred_count - tp
    pa = tp.sum() / cm.sum()
    present = truth_count > 0
    mpa = float(np.mean(tp[present] / truth_count[present]))
    seen = union > 0
    iou = float(np.mean(tp[seen] / union[seen]))
    return float(pa), mpa, iou


def cross_entropy_np(logits: np.ndarray, labels: np.ndarray, ignore_index: int | None = None) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    z = logits.reshape(-1, logits.shape[-1])
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    keep = np.ones(labels.shape, bool) if ignore_index is None else labels != ignore_index
    return float(-logp[np.flatnonzero(keep), labels[keep]].mean())


def seg_logits_to_pixels(pred: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(N, C'*P*P) head output -> (H, W, C') per-pixel logits."""
    c = config
    img = unpatchify(pred, c.patch_size, c.image_h, c.image_w)  # (C', H, W)
    return img.transpose(1, 2, 0)


def episode_loss_and_metric(config: ModelConfig, pred: np.ndarray, logits: np.ndarray | None,
                            image: np.ndarray, target) -> tuple[float, float, np.ndarray]:
    """Per-step (loss, metric, displayable prediction) for one image.

    reconstruction: RMSE / RMSE / predicted image;
    classification: cross-entropy / correct (0 or 1) / class probabilities;
    segmentation: pixel cross-entropy / pixel accuracy / predicted label grid.
    """
    c = config
    if c.task == "reconstruction" or (target is None and c.task == "classification"):
        shown = unpatchify(pred, c.patch_size, c.image_h, c.image_w)
        err = rmse(shown, image)
        return err, err, shown
    if c.task == "classification":
        z = np.asarray(logits, dtype=np.float64)
        p = np.exp(z - z.max())
        p /= p.sum()
        return cross_entropy_np(z[None], np.array([target])), float(int(np.argmax(z)) == int(target)), p
    pix = seg_logits_to_pixels(pred, c)
    labels = pix.argmax(axis=-1)
    if target is None:
        return float("nan"), float("nan"), labels
    return cross_entropy_np(pix, np.asarray(target)), float(np.mean(labels == target)), labels
