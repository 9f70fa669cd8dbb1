"""Task losses, AdamW, warmup + half-cycle cosine schedule and the training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import CorpusSpec, Sample, augment
from .glimpse import GlimpseSpec, episode_rngs, run_selection
from .metrics import episode_loss_and_metric
from .model import ConfigError, MaeModel, make_rng, patchify
from .tensor import Tensor

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 75
    warmup_epochs: int = 10
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    weight_decay: float | None = None  # None: 0 for reconstruction, 1e-4 otherwise
    batch_size: int = 32
    patience: int = 10
    mix_weight: float = 1.0  # decoder-loss weight in train-all classification
    loss_scope: str = "all"  # all | masked_only
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not self.lr_min < self.lr_max:
            raise ConfigError("need lr_min < lr_max")
        if self.mix_weight < 0:
            raise ConfigError("mix_weight must be >= 0")
        if self.loss_scope not in ("all", "masked_only"):
            raise ConfigError(f"unknown loss scope {self.loss_scope!r}")
        self.betas = tuple(self.betas)

    def decay_for(self, task: str) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.0 if task == "reconstruction" else 1e-4


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(pred: Tensor, target: np.ndarray, scope: str = "all",
                        known: np.ndarray | None = None) -> Tensor:
    """Per-image RMSE over the positions in scope, averaged over the batch.

    ``pred`` and ``target`` are (B, N, P*P*C) patch arrays (a leading batch
    axis is added to 2-D input). ``masked_only`` restricts the error to
    positions not in ``known``.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred.reshape(1, *pred.shape), target[None]
        known = None if known is None else np.asarray(known)[None]
    d = pred - target
    sq = d * d
    if scope == "all":
        per_image = T.sum_(sq, axis=(1, 2)) * (1.0 / (sq.shape[1] * sq.shape[2]))
    elif scope == "masked_only":
        if known is None:
            raise ValueError("masked_only scope needs the known mask")
        w = (~np.asarray(known, dtype=bool)).astype(pred.dtype)
        counts = w.sum(axis=1) * sq.shape[2]
        if np.any(counts == 0):
            raise ValueError("empty loss scope: every position is known")
        per_image = T.sum_(sq * w[..., None], axis=(1, 2)) / counts
    else:
        raise ValueError(f"unknown scope {scope!r}")
    return T.mean(T.sqrt(per_image))


def cross_entropy(logits: Tensor, labels, ignore_index: int | None = None) -> Tensor:
    """Mean cross-entropy of (M, K) logits against integer labels."""
    labels = np.asarray(labels).reshape(-1)
    K = logits.shape[-1]
    flat = logits.reshape(-1, K)
    if labels.shape[0] != flat.shape[0]:
        raise ValueError("one label per logit row required")
    keep = np.ones(labels.shape, bool) if ignore_index is None else labels != ignore_index
    if not keep.any():
        raise ValueError("every pixel is ignored")
    kept = labels[keep]
    if kept.min() < 0 or kept.max() >= K:
        raise ValueError(f"label out of range [0, {K})")
    rows = np.flatnonzero(keep)
    logp = T.log_softmax(flat, -1)
    return -T.mean(logp[rows, kept])


def classification_loss(logits: Tensor, labels, decoder_loss: Tensor | float | None = None,
                        mix_weight: float = 1.0) -> Tensor:
    """Cross-entropy plus ``mix_weight`` times the decoder loss (train-all regime)."""
    ce = cross_entropy(logits, labels)
    if decoder_loss is None or mix_weight == 0:
        return ce
    return ce + decoder_loss * mix_weight


def segmentation_loss(logits: Tensor, labels, ignore_index: int | None = None) -> Tensor:
    """Mean pixel-wise cross-entropy; ``logits`` has class scores on its last axis."""
    return cross_entropy(logits, labels, ignore_index)


def seg_pixel_logits(pred: Tensor, config) -> Tensor:
    """(B, N, P*P*C') head output -> (B, N, P*P, C'), aligned with patchified label grids."""
    B, N, _ = pred.shape
    return pred.reshape(B, N, config.patch_size ** 2, config.num_classes)


# ---------------------------------------------------------------------------
# optimizer and schedule


def adamw_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
               weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One AdamW update with decoupled decay. ``step`` counts from 1. Returns (p, m, v)."""
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    b1, b2 = betas
    if weight_decay:
        p = p * (1 - lr * weight_decay)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    def __init__(self, params: Sequence[Tensor], weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            new, self.m[i], self.v[i] = adamw_step(p.data, g, self.m[i], self.v[i], self.t, lr,
                                                   self.weight_decay, self.betas, self.eps)
            p.data = new.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then half-cycle cosine towards ``lr_min``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_max * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# episodes with gradients


def stack_targets(samples: Sequence[Sample], task: str):
    if task == "classification":
        return np.array([s.label for s in samples])
    if task == "segmentation":
        return np.stack([s.mask for s in samples])
    return None


def batch_loss(model: MaeModel, images: np.ndarray, observed: np.ndarray, known: np.ndarray,
               targets, tcfg: TrainConfig) -> Tensor:
    """Task loss of the final prediction given the glimpses gathered so far."""
    c = model.config
    dt = model.params["cls_token"].dtype
    out = model.forward(patchify(observed.astype(dt), c.patch_size), known)
    if c.task == "segmentation":
        labels = patchify(np.asarray(targets)[:, None].astype(np.float64), c.patch_size)
        return segmentation_loss(seg_pixel_logits(out.pred, c), labels.astype(np.int64))
    recon = reconstruction_loss(out.pred, patchify(images.astype(dt), c.patch_size), tcfg.loss_scope, known)
    if c.task == "classification":
        if c.head_mode == "head_only":
            return cross_entropy(out.logits, targets)
        return classification_loss(out.logits, targets, recon, tcfg.mix_weight)
    return recon


def evaluate_final(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, selector, seed: int,
                   batch_size: int = 32) -> tuple[list[float], list[float]]:
    """Per-image (loss, metric) after the full glimpse budget, no gradients."""
    c = model.config
    losses, metrics = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        images = np.stack([s.image for s in chunk])
        idx = range(start, start + len(chunk))
        states, _ = run_selection(model, images, spec, selector, episode_rngs(seed, idx))
        observed = np.stack([s.observed for s in states]).astype(model.params["cls_token"].dtype)
        known = np.stack([s.known_mask.reshape(-1) for s in states])
        with T.no_grad():
            out = model.forward(patchify(observed, c.patch_size), known)
        targets = stack_targets(chunk, c.task)
        for b in range(len(chunk)):
            loss, metric, _ = episode_loss_and_metric(
                c, out.pred.data[b], None if out.logits is None else out.logits.data[b], images[b],
                None if targets is None else targets[b])
            losses.append(loss)
            metrics.append(metric)
    return losses, metrics


@dataclass
class FitResult:
    model: MaeModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def fit(model: MaeModel, train: Sequence[Sample], val: Sequence[Sample], tcfg: TrainConfig,
        spec: GlimpseSpec, selector="attention", history_path: str | Path | None = None,
        record_timing: bool = True, corpus_spec: CorpusSpec | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train with one exploration episode per image per step.

    Selection runs without gradients; the loss of the final prediction is
    backpropagated. The best validation state is restored at the end.
    """
    c = model.config
    spec.validate(c.patch_size, c.image_h, c.image_w)
    if c.task == "classification" and any(s.label is None for s in train):
        raise ConfigError("classification needs labelled samples")
    if c.task == "segmentation" and any(s.mask is None for s in train):
        raise ConfigError("segmentation needs label masks")
    opt = AdamW(model.trainable_parameters(), tcfg.decay_for(c.task), tcfg.betas, tcfg.eps)
    aug = corpus_spec or CorpusSpec(augment=tcfg.augment)
    result = FitResult(model)
    best, best_state, bad = math.inf, model.state_dict(), 0
    hist_file = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        hist_file = open(history_path, "w")
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, tcfg)
            order = make_rng(tcfg.seed, 0xE90C, epoch).permutation(len(train))
            total, count = 0.0, 0
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start: start + tcfg.batch_size]
                batch = [train[i] for i in idx]
                if aug.augment:
                    batch = [augment(s, make_rng(tcfg.seed, 0xA06, epoch, int(i)), aug) for s, i in zip(batch, idx)]
                images = np.stack([s.image for s in batch])
                rngs = [make_rng(tcfg.seed, 0x7A1, epoch, int(i)) for i in idx]
                states, _ = run_selection(model, images, spec, selector, rngs)
                observed = np.stack([s.observed for s in states])
                known = np.stack([s.known_mask.reshape(-1) for s in states])
                with T.tape_scope():
                    loss = batch_loss(model, images, observed, known, stack_targets(batch, c.task), tcfg)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        model.load_state_dict(best_state)
                        raise DivergenceError(f"loss became {value} in epoch {epoch}", best_state)
                    opt.zero_grad()
                    T.backward(loss)
                try:
                    opt.step(lr)
                except DivergenceError as e:
                    model.load_state_dict(best_state)
                    raise DivergenceError(f"{e} in epoch {epoch}", best_state) from None
                total += value * len(batch)
                count += len(batch)
            val_losses, val_metrics = evaluate_final(model, val, spec, selector, tcfg.seed, tcfg.batch_size)
            val_loss = float(np.mean(val_losses)) if val_losses else total / max(count, 1)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": total / max(count, 1),
                "val_loss": val_loss,
                "val_metric": float(np.mean(val_metrics)) if val_metrics else None,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if record_timing else None,
            }
            result.history.append(record)
            if hist_file is not None:
                hist_file.write(json.dumps(record) + "\n")
                hist_file.flush()
            if on_epoch is not None:
                on_epoch(record)
            log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, record["train_loss"], val_loss)
            if val_loss < best:
                best, best_state, bad = val_loss, model.state_dict(), 0
                result.best_epoch = epoch
            else:
                bad += 1
                if bad > tcfg.patience:
                    result.stopped_early = True
                    break
    finally:
        if hist_file is not None:
            hist_file.close()
    model.load_state_dict(best_state)
    return result
