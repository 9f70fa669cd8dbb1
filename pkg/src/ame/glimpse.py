"""Glimpse geometry, entropy maps, selectors and the exploration loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .metrics import episode_loss_and_metric
from .model import ConfigError, MaeModel, make_rng, patchify, unpatchify


class ExplorationComplete(Exception):
    """No admissible glimpse remains."""


class ConsistencyError(RuntimeError):
    """Attention rows that are not probability distributions."""


@dataclass
class GlimpseSpec:
    kind: str = "plain"  # plain | retinal
    glimpse_px: int = 16
    levels: int | None = None  # defaults to 3 for retinal, 1 for plain
    num_glimpses: int = 8

    def __post_init__(self):
        if self.kind not in ("plain", "retinal"):
            raise ConfigError(f"unknown glimpse kind {self.kind!r}")
        if self.levels is None:
            self.levels = 3 if self.kind == "retinal" else 1
        if self.kind == "plain" and self.levels != 1:
            raise ConfigError("plain glimpses have exactly one level")
        if self.num_glimpses < 0 or self.glimpse_px <= 0:
            raise ConfigError("glimpse size and count must be positive")

    def validate(self, patch_size: int, image_h: int | None = None, image_w: int | None = None) -> None:
        P = patch_size
        if self.glimpse_px % P:
            raise ConfigError(f"glimpse {self.glimpse_px}px is not a multiple of patch size {P}")
        if self.kind == "retinal":
            if self.glimpse_px != self.levels * P:
                raise ConfigError(f"retinal glimpse must be levels*P = {self.levels * P}px, got {self.glimpse_px}")
            if any((self.glimpse_px - k * P) % 2 for k in range(1, self.levels + 1)):
                raise ConfigError("retinal levels cannot be centred on this pixel grid")
        if image_h is not None and (self.glimpse_px > image_h or self.glimpse_px > image_w):
            raise ConfigError("glimpse larger than the image")

    def footprint_side(self, patch_size: int) -> int:
        return self.glimpse_px // patch_size

    def footprint(self, patch_size: int) -> int:
        return self.footprint_side(patch_size) ** 2

    def source_pixels(self, patch_size: int) -> int:
        """Distinct sensor samples per glimpse."""
        if self.kind == "retinal":
            return self.levels * patch_size ** 2
        return self.glimpse_px ** 2

    @property
    def regime(self) -> str:
        tag = " (RETINAL)" if self.kind == "retinal" else ""
        return f"{self.num_glimpses}x{self.glimpse_px}^2{tag}"

    def pixel_percent(self, image_h: int, image_w: int, patch_size: int) -> float:
        return 100.0 * self.num_glimpses * self.source_pixels(patch_size) / (image_h * image_w)

    def area_percent(self, image_h: int, image_w: int) -> float:
        return 100.0 * self.num_glimpses * self.glimpse_px ** 2 / (image_h * image_w)


@dataclass
class EntropyMap:
    values: np.ndarray  # (H/P, W/P), nats

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class ExplorationState:
    known_mask: np.ndarray  # (gh, gw) bool
    observed: np.ndarray  # (C, H, W) pixels gathered so far
    level: np.ndarray  # (H, W) finest retinal level seen per pixel; inf = unseen
    anchors: list[tuple[int, int]] = field(default_factory=list)
    entropy_maps: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def empty(cls, channels: int, image_h: int, image_w: int, patch_size: int) -> "ExplorationState":
        gh, gw = image_h // patch_size, image_w // patch_size
        return cls(known_mask=np.zeros((gh, gw), dtype=bool),
                   observed=np.zeros((channels, image_h, image_w)),
                   level=np.full((image_h, image_w), np.inf))

    @property
    def step(self) -> int:
        return len(self.anchors)


# ---------------------------------------------------------------------------
# entropy


def row_entropy(probs: np.ndarray, check: bool = True) -> np.ndarray:
    """Shannon entropy (nats) of every row along the last axis, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if check:
        sums = p.sum(axis=-1)
        if np.any(np.abs(sums - 1) > 1e-4) or np.any(p < 0):
            raise ConsistencyError(f"attention rows not normalized (max deviation {np.abs(sums - 1).max():.3g})")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def entropy_values(probs: np.ndarray, known_mask: np.ndarray) -> np.ndarray:
    """Per-patch entropy summed over heads for (heads, S, S) rows of one image.

    The CLS row (index 0) is dropped and known positions are zeroed.
    """
    heads, S, _ = probs.shape
    known_mask = np.asarray(known_mask, dtype=bool)
    if S != known_mask.size + 1:
        raise ValueError(f"capture has {S} rows, expected {known_mask.size + 1}")
    h = row_entropy(probs).sum(axis=0)[1:]
    # rounding can push a uniform row a hair past ln S
    h = np.clip(h, 0.0, heads * math.log(S))
    h = h.reshape(known_mask.shape)
    h[known_mask] = 0.0
    return h


def entropy_map(capture, known_mask: np.ndarray, index: int = 0, source: str = "attention") -> EntropyMap:
    """Entropy map of one batch entry of an :class:`AttentionCapture` (or a raw (heads, S, S) array)."""
    if isinstance(capture, np.ndarray):
        probs = capture if capture.ndim == 3 else capture[index]
    else:
        probs = capture.entropy_probs(source)[index]
    return EntropyMap(entropy_values(probs, known_mask))


# ---------------------------------------------------------------------------
# selectors


def _anchor_grid(spec: GlimpseSpec, known_mask: np.ndarray, P: int) -> tuple[int, int, int]:
    f = spec.footprint_side(P)
    gh, gw = known_mask.shape
    if f > gh or f > gw:
        raise ExplorationComplete("glimpse does not fit in the image")
    return f, gh - f + 1, gw - f + 1


def select_ame(emap: EntropyMap | np.ndarray, spec: GlimpseSpec, known_mask: np.ndarray, P: int) -> tuple[int, int]:
    """Anchor maximizing the footprint-mean entropy; ties go to the smallest row-major anchor.

    Anchors whose footprint is already fully known are only eligible when no
    other anchor remains, in which case exploration is complete.
    """
    values = emap.values if isinstance(emap, EntropyMap) else np.asarray(emap)
    known_mask = np.asarray(known_mask, dtype=bool)
    f, ah, aw = _anchor_grid(spec, known_mask, P)
    scores = sliding_window_view(values, (f, f)).mean(axis=(-2, -1))
    full = sliding_window_view(known_mask, (f, f)).all(axis=(-2, -1))
    if full.all():
        raise ExplorationComplete("every glimpse position is already known")
    scores = np.where(full, -np.inf, scores)
    r, c = divmod(int(np.argmax(scores)), aw)
    return r, c


def select_random(spec: GlimpseSpec, known_mask: np.ndarray, rng: np.random.Generator, P: int) -> tuple[int, int]:
    """Uniform over every admissible anchor; overlap with known patches allowed."""
    f, ah, aw = _anchor_grid(spec, np.asarray(known_mask), P)
    r, c = divmod(int(rng.integers(ah * aw)), aw)
    return r, c


def select_checkerboard(spec: GlimpseSpec, known_mask: np.ndarray, rng: np.random.Generator,
                        P: int) -> tuple[int, int]:
    """Uniform draw among unused even-parity cells of a glimpse-sized tiling, then odd cells."""
    known_mask = np.asarray(known_mask, dtype=bool)
    f, _, _ = _anchor_grid(spec, known_mask, P)
    gh, gw = known_mask.shape
    ch, cw = gh // f, gw // f
    used = known_mask[: ch * f, : cw * f].reshape(ch, f, cw, f).all(axis=(1, 3))
    for parity in (0, 1):
        cells = [(i, j) for i in range(ch) for j in range(cw) if (i + j) % 2 == parity and not used[i, j]]
        if cells:
            i, j = cells[int(rng.integers(len(cells)))]
            return i * f, j * f
    raise ExplorationComplete("checkerboard cells exhausted")


@dataclass(frozen=True)
class Selector:
    name: str
    needs_entropy: bool
    choose: Callable  # (emap | None, spec, known_mask, rng, P) -> anchor


SELECTORS = {
    "attention": Selector("attention", True, lambda e, s, k, r, P: select_ame(e, s, k, P)),
    "random": Selector("random", False, lambda e, s, k, r, P: select_random(s, k, r, P)),
    "checker": Selector("checker", False, lambda e, s, k, r, P: select_checkerboard(s, k, r, P)),
}
_ALIASES = {"ame": "attention", "checkerboard": "checker"}


def get_selector(name: str | Selector) -> Selector:
    if isinstance(name, Selector):
        return name
    key = _ALIASES.get(name, name)
    if key not in SELECTORS:
        raise ConfigError(f"unknown selector {name!r}; choose from {sorted(SELECTORS)}")
    return SELECTORS[key]


# ---------------------------------------------------------------------------
# glimpse extraction


def extract_glimpse(image: np.ndarray, anchor_px: tuple[int, int], spec: GlimpseSpec,
                    P: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Cut one glimpse at top-left pixel ``anchor_px``.

    Returns the (C, g, g) pixel block fed to the model, a (g, g) map of the
    retinal level each pixel came from (1 = full resolution), and the number
    of distinct sensor samples.
    """
    g = spec.glimpse_px
    y, x = anchor_px
    C, H, W = image.shape
    if y < 0 or x < 0 or y + g > H or x + g > W:
        raise ValueError(f"glimpse at {anchor_px} of size {g} leaves the {H}x{W} image")
    if spec.kind == "plain":
        return image[:, y: y + g, x: x + g].copy(), np.ones((g, g), dtype=np.int64), g * g
    return extract_retinal_glimpse(image, anchor_px, spec, P)


def extract_retinal_glimpse(image: np.ndarray, anchor_px: tuple[int, int], spec: GlimpseSpec,
                            P: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Concentric levels: level k spans the central kP x kP window at 1/k resolution.

    Every level is area-averaged to P x P samples, upsampled by nearest
    neighbour and pasted coarse-to-fine so the centre keeps full resolution.
    """
    if spec.kind != "retinal":
        raise ConfigError("extract_retinal_glimpse needs a retinal spec")
    spec.validate(P)
    g, L = spec.glimpse_px, spec.levels
    y, x = anchor_px
    C, H, W = image.shape
    if y < 0 or x < 0 or y + g > H or x + g > W:
        raise ValueError(f"glimpse at {anchor_px} of size {g} leaves the {H}x{W} image")
    block = np.empty((C, g, g), dtype=image.dtype)
    levels = np.empty((g, g), dtype=np.int64)
    for k in range(L, 0, -1):
        side = k * P
        off = (g - side) // 2
        win = image[:, y + off: y + off + side, x + off: x + off + side]
        down = win.reshape(C, P, k, P, k).mean(axis=(2, 4))
        block[:, off: off + side, off: off + side] = down.repeat(k, axis=1).repeat(k, axis=2)
        levels[off: off + side, off: off + side] = k
    return block, levels, L * P * P


def apply_glimpse(state: ExplorationState, image: np.ndarray, anchor: tuple[int, int], spec: GlimpseSpec,
                  P: int) -> None:
    """Record a glimpse at patch-grid ``anchor``; finer observations overwrite coarser ones."""
    r, c = anchor
    f = spec.footprint_side(P)
    y, x = r * P, c * P
    g = spec.glimpse_px
    block, lv, _ = extract_glimpse(image, (y, x), spec, P)
    region = state.level[y: y + g, x: x + g]
    finer = lv <= region
    state.observed[:, y: y + g, x: x + g] = np.where(finer, block, state.observed[:, y: y + g, x: x + g])
    region[finer] = lv[finer]
    state.known_mask[r: r + f, c: c + f] = True
    state.anchors.append((r, c))


# ---------------------------------------------------------------------------
# exploration loop


@dataclass
class EpisodeReport:
    selector: str
    regime: str
    anchors: list[tuple[int, int]]
    per_step_loss: list[float]  # index t = after t glimpses
    per_step_metric: list[float]
    entropy_maps: list[np.ndarray]  # maps used to choose glimpse t+1
    known_mask: np.ndarray
    predictions: list[np.ndarray] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)  # observed composites per step
    final_prediction: np.ndarray | None = None
    completed_early: bool = False
    timing_ms: float | None = None

    @property
    def final_loss(self) -> float:
        return self.per_step_loss[-1]

    @property
    def final_metric(self) -> float:
        return self.per_step_metric[-1]

    def to_dict(self) -> dict:
        return {
            "selector": self.selector,
            "regime": self.regime,
            "anchors": [list(a) for a in self.anchors],
            "per_step_loss": [float(v) for v in self.per_step_loss],
            "per_step_metric": [float(v) for v in self.per_step_metric],
            "entropy_maps": [np.asarray(m, dtype=float).round(12).tolist() for m in self.entropy_maps],
            "known_mask": self.known_mask.astype(int).tolist(),
            "completed_early": self.completed_early,
            "timing_ms": self.timing_ms,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def episode_rngs(seed: int, indices: Sequence[int]) -> list[np.random.Generator]:
    """One generator per image, keyed by (seed, image index) so batching cannot change draws."""
    return [make_rng(seed, 0x61AE, int(i)) for i in indices]


@dataclass
class _StepOutput:
    pred: np.ndarray  # (B, N, C'*P*P)
    logits: np.ndarray | None
    probs: np.ndarray | None  # (B, heads, S, S) entropy source rows


def _forward_states(model: MaeModel, states: list[ExplorationState], need_probs: bool) -> _StepOutput:
    c = model.config
    observed = np.stack([s.observed for s in states]).astype(model.params["cls_token"].dtype)
    known = np.stack([s.known_mask.reshape(-1) for s in states])
    with T.no_grad():
        out = model.forward(patchify(observed, c.patch_size), known)
    probs = out.capture.entropy_probs(c.entropy_source) if need_probs else None
    logits = None if out.logits is None else out.logits.data
    return _StepOutput(out.pred.data, logits, probs)


def _mask_only(model: MaeModel, need_probs: bool) -> _StepOutput:
    """Step-0 pass with zero known patches; content independent, so computed once."""
    c = model.config
    with T.no_grad():
        out = model.forward(np.zeros((1, c.num_patches, c.patch_dim), dtype=model.params["cls_token"].dtype),
                            np.zeros((1, c.num_patches), dtype=bool))
    probs = out.capture.entropy_probs(c.entropy_source) if need_probs else None
    logits = None if out.logits is None else out.logits.data
    return _StepOutput(out.pred.data, logits, probs)


def run_selection(model: MaeModel, images: np.ndarray, spec: GlimpseSpec, selector, rngs,
                  on_step: Callable[[int, _StepOutput, list[ExplorationState]], None] | None = None,
                  ) -> tuple[list[ExplorationState], list[bool]]:
    """Run the glimpse loop for a batch and return final states and early-stop flags.

    Forward passes happen only when the selector needs entropy or ``on_step``
    wants per-step outputs. ``on_step(t, output, states)`` sees the model
    output after ``t`` glimpses for t = 0..T-1.
    """
    c = model.config
    P = c.patch_size
    spec.validate(P, c.image_h, c.image_w)
    sel = get_selector(selector)
    B = len(images)
    states = [ExplorationState.empty(c.channels, c.image_h, c.image_w, P) for _ in range(B)]
    done = [False] * B
    need_forward = sel.needs_entropy or on_step is not None
    for t in range(spec.num_glimpses):
        out = None
        if need_forward:
            if t == 0:
                first = _mask_only(model, sel.needs_entropy)
                out = _StepOutput(np.repeat(first.pred, B, axis=0),
                                  None if first.logits is None else np.repeat(first.logits, B, axis=0),
                                  None if first.probs is None else np.repeat(first.probs, B, axis=0))
            else:
                out = _forward_states(model, states, sel.needs_entropy)
        for b, st in enumerate(states):
            emap = None
            if out is not None and out.probs is not None:
                emap = EntropyMap(entropy_values(out.probs[b], st.known_mask))
                st.entropy_maps.append(emap.values)
            if done[b]:
                continue
            try:
                anchor = sel.choose(emap, spec, st.known_mask, rngs[b], P)
            except ExplorationComplete:
                done[b] = True
                continue
            apply_glimpse(st, images[b], anchor, spec, P)
        if on_step is not None:
            on_step(t, out, states)
    return states, done


def explore_batch(model: MaeModel, images: np.ndarray, spec: GlimpseSpec, selector,
                  targets=None, seed: int = 0, indices: Sequence[int] | None = None,
                  record: bool = True, rngs=None, record_timing: bool = True) -> list[EpisodeReport]:
    """Run full episodes for a batch of images and report per-step losses and metrics.

    ``targets`` are class ids (classification) or label grids (segmentation);
    reconstruction targets the images themselves.
    """
    c = model.config
    P = c.patch_size
    images = np.asarray(images)
    B = len(images)
    if rngs is None:
        rngs = episode_rngs(seed, range(B) if indices is None else indices)
    sel = get_selector(selector)
    start = time.perf_counter()
    losses = [[] for _ in range(B)]
    metrics = [[] for _ in range(B)]
    preds = [[] for _ in range(B)]
    inputs = [[] for _ in range(B)]
    finals: list = [None] * B

    def collect(out: _StepOutput, states):
        for b in range(B):
            loss, metric, shown = episode_loss_and_metric(c, out.pred[b], None if out.logits is None else out.logits[b],
                                                          images[b], None if targets is None else targets[b])
            losses[b].append(loss)
            metrics[b].append(metric)
            finals[b] = shown
            if record:
                preds[b].append(shown)
                inputs[b].append(composite(states[b]))

    # pass t sees t glimpses; its entropy map picks glimpse t + 1
    states = [ExplorationState.empty(c.channels, c.image_h, c.image_w, P) for _ in range(B)]
    done = [False] * B
    spec.validate(P, c.image_h, c.image_w)
    for t in range(spec.num_glimpses + 1):
        if t == 0:
            first = _mask_only(model, True)
            out = _StepOutput(np.repeat(first.pred, B, axis=0),
                              None if first.logits is None else np.repeat(first.logits, B, axis=0),
                              np.repeat(first.probs, B, axis=0))
        else:
            out = _forward_states(model, states, True)
        collect(out, states)
        if t == spec.num_glimpses:
            break
        for b, st in enumerate(states):
            emap = entropy_values(out.probs[b], st.known_mask)
            st.entropy_maps.append(emap)
            if done[b]:
                continue
            try:
                anchor = sel.choose(EntropyMap(emap), spec, st.known_mask, rngs[b], P)
            except ExplorationComplete:
                done[b] = True
                continue
            apply_glimpse(st, images[b], anchor, spec, P)
    elapsed = (time.perf_counter() - start) * 1000.0 / max(B, 1)
    return [EpisodeReport(selector=sel.name, regime=spec.regime, anchors=list(st.anchors),
                          per_step_loss=losses[b], per_step_metric=metrics[b],
                          entropy_maps=st.entropy_maps, known_mask=st.known_mask.copy(),
                          predictions=preds[b], inputs=inputs[b], final_prediction=finals[b], completed_early=done[b],
                          timing_ms=round(elapsed, 3) if record_timing else None)
            for b, st in enumerate(states)]


def explore(model: MaeModel, image: np.ndarray, spec: GlimpseSpec, selector, target=None,
            seed: int = 0, index: int = 0, record: bool = True) -> EpisodeReport:
    """Single-image episode: mask-only pass, then one pass per glimpse, T + 1 passes in total."""
    targets = None if target is None else [target]
    return explore_batch(model, np.asarray(image)[None], spec, selector, targets, seed, [index], record)[0]


def composite(state: ExplorationState, fill: float = 0.5) -> np.ndarray:
    """Observed pixels with unknown areas painted gray."""
    seen = np.isfinite(state.level)
    return np.where(seen[None], state.observed, fill)
