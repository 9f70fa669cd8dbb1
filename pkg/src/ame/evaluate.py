"""Corpus evaluation, glimpse-count sweeps, glimpse maps, selector and layer ablations."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, write_pgm
from .glimpse import EpisodeReport, GlimpseSpec, explore_batch
from .metrics import accuracy, rmse, segmentation_metrics  # noqa: F401  (re-exported)
from .model import MaeModel
from .train import stack_targets

SELECTOR_ORDER = ("attention", "random", "checker")


@dataclass
class MetricsRecord:
    task: str
    selector: str
    regime: str
    metrics: dict[str, float]
    pixel_percent: float
    area_percent: float
    seed: int
    num_images: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ame metrics file",
    "type": "object",
    "required": ["records"],
    "properties": {
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["task", "selector", "regime", "metrics", "pixel_percent", "area_percent", "seed"],
                "properties": {
                    "task": {"enum": ["reconstruction", "classification", "segmentation"]},
                    "selector": {"type": "string"},
                    "regime": {"type": "string"},
                    "metrics": {"type": "object", "additionalProperties": {"type": ["number", "null"]}},
                    "pixel_percent": {"type": "number", "minimum": 0, "maximum": 100},
                    "area_percent": {"type": "number", "minimum": 0, "maximum": 100},
                    "seed": {"type": "integer"},
                    "num_images": {"type": "integer", "minimum": 0},
                    "extra": {"type": "object"},
                },
            },
        },
        "sweep_glimpses": {"type": "array"},
        "sweep_layers": {"type": "array"},
        "ablation": {"type": "array"},
        "glimpse_map": {"type": "object"},
    },
}


def _fsum_mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if len(values) else float("nan")


def run_episodes(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, selector, seed: int = 0,
                 batch_size: int = 32, record: bool = False, record_timing: bool = True) -> list[EpisodeReport]:
    """Episodes for every sample; the random draws depend on (seed, sample index) only."""
    reports = []
    task = model.config.task
    for start in range(0, len(samples), batch_size):
        chunk = samples[start: start + batch_size]
        images = np.stack([s.image for s in chunk])
        targets = stack_targets(chunk, task) if _has_targets(chunk, task) else None
        reports += explore_batch(model, images, spec, selector, targets, seed,
                                 range(start, start + len(chunk)), record, record_timing=record_timing)
    return reports


def _has_targets(samples, task) -> bool:
    if task == "classification":
        return all(s.label is not None for s in samples)
    if task == "segmentation":
        return all(s.mask is not None for s in samples)
    return False


def summarize(model: MaeModel, samples: Sequence[Sample], reports: Sequence[EpisodeReport], spec: GlimpseSpec,
              selector: str, seed: int) -> MetricsRecord:
    c = model.config
    if c.task == "segmentation" and _has_targets(samples, c.task):
        pa, mpa, iou = segmentation_metrics([r.final_prediction for r in reports], [s.mask for s in samples],
                                            c.num_classes)
        values = {"pa": pa, "mpa": mpa, "iou": iou, "loss": _fsum_mean([r.final_loss for r in reports])}
    elif c.task == "classification" and _has_targets(samples, c.task):
        preds = [int(np.argmax(r.final_prediction)) for r in reports]
        values = {"accuracy": accuracy(preds, [s.label for s in samples]),
                  "loss": _fsum_mean([r.final_loss for r in reports])}
    else:
        values = {"rmse": _fsum_mean([r.final_metric for r in reports])}
    return MetricsRecord(task=c.task, selector=selector, regime=spec.regime, metrics=values,
                         pixel_percent=spec.pixel_percent(c.image_h, c.image_w, c.patch_size),
                         area_percent=spec.area_percent(c.image_h, c.image_w), seed=seed,
                         num_images=len(samples))


def evaluate(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, selector="attention", seed: int = 0,
             batch_size: int = 32) -> tuple[MetricsRecord, list[EpisodeReport]]:
    reports = run_episodes(model, samples, spec, selector, seed, batch_size)
    name = reports[0].selector if reports else str(selector)
    return summarize(model, samples, reports, spec, name, seed), reports


def primary_metric(task: str) -> str:
    return {"reconstruction": "rmse", "classification": "accuracy", "segmentation": "pa"}[task]


def glimpse_sweep(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, selector,
                  t_values: Sequence[int], seed: int = 0, batch_size: int = 32,
                  reports: Sequence[EpisodeReport] | None = None) -> list[dict]:
    """Corpus-mean per-step metric after each t in ``t_values``, from one episode of max(t) glimpses.

    Per-step values are the episodes' own per-step reports, so a sweep point
    at t equals the episode metric after t glimpses.
    """
    t_values = sorted(set(int(t) for t in t_values))
    if not t_values or t_values[0] < 0:
        raise ValueError("t values must be non-negative")
    if reports is None:
        run_spec = GlimpseSpec(spec.kind, spec.glimpse_px, spec.levels, t_values[-1])
        reports = run_episodes(model, samples, run_spec, selector, seed, batch_size)
    name = primary_metric(model.config.task)
    rows = []
    for t in t_values:
        if any(t >= len(r.per_step_metric) for r in reports):
            raise ValueError(f"episodes are shorter than t={t}")
        rows.append({"t": t, "metric": name,
                     "value": _fsum_mean([r.per_step_metric[t] for r in reports]),
                     "loss": _fsum_mean([r.per_step_loss[t] for r in reports])})
    return rows


def average_glimpse_map(episodes: Sequence[EpisodeReport], footprint_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of episodes observing each patch, and the same for the first glimpse alone."""
    if not episodes:
        raise ValueError("no episodes")
    occupancy = np.mean([e.known_mask.astype(np.float64) for e in episodes], axis=0)
    first = np.zeros(episodes[0].known_mask.shape)
    for e in episodes:
        if e.anchors:
            r, c = e.anchors[0]
            first[r: r + footprint_side, c: c + footprint_side] += 1
    return occupancy, first / len(episodes)


def layer_sweep(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, seed: int = 0,
                batch_size: int = 32) -> list[dict]:
    """One evaluation per decoder layer used as the attention source (weights shared)."""
    rows = []
    for layer in range(model.config.dec_layers):
        rec, _ = evaluate(model.with_source_layer(layer), samples, spec, "attention", seed, batch_size)
        rows.append({"layer": layer, **rec.metrics})
    return rows


def ablate_selectors(model: MaeModel, samples: Sequence[Sample], spec: GlimpseSpec, seeds: Sequence[int],
                     selectors: Sequence[str] = SELECTOR_ORDER, batch_size: int = 32) -> list[dict]:
    """Same weights, corpus and seeds for every selector; one row per selector."""
    rows = []
    key = primary_metric(model.config.task)
    for sel in selectors:
        per_seed = []
        for seed in seeds:
            rec, _ = evaluate(model, samples, spec, sel, seed, batch_size)
            per_seed.append(rec.metrics[key])
        rows.append({"selector": sel, "regime": spec.regime, "metric": key,
                     "per_seed": per_seed, "mean": _fsum_mean(per_seed)})
    return rows


# ---------------------------------------------------------------------------
# writers


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_tsv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in cols])
    Path(path).write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def grid_to_image(grid: np.ndarray, patch_size: int, scale: float | None = None) -> np.ndarray:
    """Upsample a patch grid to pixels, scaled into [0, 1] by ``scale`` (default: grid max)."""
    grid = np.asarray(grid, dtype=np.float64)
    top = grid.max() if scale is None else scale
    norm = grid / top if top > 0 else np.zeros_like(grid)
    return np.kron(norm, np.ones((patch_size, patch_size)))


def write_grid_pgm(path: str | Path, grid: np.ndarray, patch_size: int, scale: float | None = None) -> None:
    write_pgm(path, grid_to_image(grid, patch_size, scale))
