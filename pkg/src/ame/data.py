"""Image ingestion, augmentation, synthetic corpora and splitting.

On-disk corpus layout::

    images/*.ppm        binary P6 (or P5) pixmaps
    labels.tsv          optional, "<file name>\\t<class id>" per line
    masks/*.pgm         optional, class id per pixel, same stem as the image
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import make_rng


class IngestionError(IOError):
    """Unreadable or malformed image file."""


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int | None = None
    mask: np.ndarray | None = None  # (H, W) class ids
    name: str = ""
    shapes: list[dict] = field(default_factory=list)  # analytic geometry of synthetic shapes


@dataclass
class CorpusSpec:
    source: str = "shapes"  # directory path or synthetic generator name
    image_h: int = 64
    image_w: int = 64
    n: int = 1000  # synthetic corpus size
    split: float = 0.9
    seed: int = 0
    augment: bool = False
    scale_min: float = 0.8
    scale_max: float = 1.2
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError(f"split ratio must lie in (0, 1), got {self.split}")


# ---------------------------------------------------------------------------
# portable pixmaps


def _tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    vals, i, n = [], 2, len(data)
    while len(vals) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and data[j:j + 1].isdigit():
            j += 1
        if j == i:
            raise IngestionError("malformed pixmap header")
        vals.append(int(data[i:j]))
        i = j
    return vals, i + 1  # one whitespace byte separates header and raster


def read_pnm(path: str | Path) -> np.ndarray:
    """Read a binary P6/P5 file as (C, H, W) floats in [0, 1]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    magic = data[:2]
    if magic not in (b"P6", b"P5"):
        raise IngestionError(f"{path}: unsupported pixmap magic {magic!r}")
    try:
        (w, h, maxval), off = _tokens(data, 3)
    except IngestionError as e:
        raise IngestionError(f"{path}: {e}") from e
    C = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * C * dtype.itemsize
    if len(data) - off < need:
        raise IngestionError(f"{path}: truncated raster ({len(data) - off} of {need} bytes)")
    arr = np.frombuffer(data, dtype=dtype, count=w * h * C, offset=off).reshape(h, w, C)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def read_pgm_labels(path: str | Path) -> np.ndarray:
    """Read a P5 file of raw integer class ids (no scaling)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"{path}: {e}") from e
    if data[:2] != b"P5":
        raise IngestionError(f"{path}: label masks must be binary P5")
    (w, h, maxval), off = _tokens(data, 3)
    if len(data) - off < w * h:
        raise IngestionError(f"{path}: truncated raster")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).astype(np.int64)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write (3, H, W) floats in [0, 1] as binary P6."""
    img = to_bytes(image)
    C, H, W = img.shape
    if C == 1:
        return write_pgm(path, image[0])
    header = f"P6\n{W} {H}\n255\n".encode()
    Path(path).write_bytes(header + img.transpose(1, 2, 0).tobytes())


def write_pgm(path: str | Path, gray: np.ndarray, raw: bool = False) -> None:
    """Write an (H, W) array as binary P5; floats in [0, 1] unless ``raw`` (integers 0..255)."""
    arr = np.asarray(gray)
    img = arr.astype(np.uint8) if raw else to_bytes(arr)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as e:  # pragma: no cover
            raise IngestionError(f"{path}: PNG support needs Pillow") from e
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as e:
            raise IngestionError(f"{path}: {e}") from e
        return arr.transpose(2, 0, 1)
    raise IngestionError(f"{path}: unsupported image format")


# ---------------------------------------------------------------------------
# resizing


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, H: int, W: int) -> np.ndarray:
    """Bilinear resize of (C, h, w); same size returns an exact copy."""
    C, h, w = image.shape
    if (h, w) == (H, W):
        return image.copy()
    y0, y1, fy = _axis_weights(h, H)
    x0, x1, fx = _axis_weights(w, W)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


def resize_nearest(labels: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = labels.shape
    ys = np.minimum(((np.arange(H) + 0.5) * h / H).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(W) + 0.5) * w / W).astype(np.int64), w - 1)
    return labels[ys][:, xs]


def load_and_resize(path: str | Path, H: int, W: int, label: int | None = None,
                    mask_path: str | Path | None = None) -> Sample:
    image = resize_bilinear(read_image(path), H, W)
    mask = None
    if mask_path is not None:
        mask = resize_nearest(read_pgm_labels(mask_path), H, W)
    return Sample(np.clip(image, 0.0, 1.0), label, mask, Path(path).name)


# ---------------------------------------------------------------------------
# augmentation


def hflip(sample: Sample) -> Sample:
    mask = None if sample.mask is None else sample.mask[:, ::-1].copy()
    return Sample(sample.image[:, :, ::-1].copy(), sample.label, mask, sample.name)


def augment(sample: Sample, rng: np.random.Generator, spec: CorpusSpec | None = None,
            force_flip: bool | None = None) -> Sample:
    """Random scale, crop (or edge-pad) back to size, horizontal flip. Labels use nearest neighbour."""
    spec = spec or CorpusSpec()
    if not spec.augment:
        return sample
    C, H, W = sample.image.shape
    s = rng.uniform(spec.scale_min, spec.scale_max)
    h, w = max(1, int(round(H * s))), max(1, int(round(W * s)))
    img = resize_bilinear(sample.image, h, w)
    mask = None if sample.mask is None else resize_nearest(sample.mask, h, w)

    def fit(length, target):
        if length >= target:
            start = int(rng.integers(length - target + 1))
            return slice(start, start + target), (0, 0)
        before = int(rng.integers(target - length + 1))
        return slice(0, length), (before, target - length - before)

    ys, ypad = fit(h, H)
    xs, xpad = fit(w, W)
    img = np.pad(img[:, ys, xs], ((0, 0), ypad, xpad), mode="edge")
    if mask is not None:
        mask = np.pad(mask[ys, xs], (ypad, xpad), mode="edge")
    out = Sample(np.clip(img, 0.0, 1.0), sample.label, mask, sample.name)
    flip = rng.random() < spec.flip_prob if force_flip is None else force_flip
    return hflip(out) if flip else out


# ---------------------------------------------------------------------------
# synthetic corpora

SHAPE_CLASSES = ("rectangle", "circle")  # class ids 0, 1; mask ids are 1 + class id


def inside_shape(shape: dict, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Analytic containment of pixel centres."""
    cy, cx = ys + 0.5, xs + 0.5
    if shape["kind"] == "rectangle":
        return (cy >= shape["y0"]) & (cy < shape["y1"]) & (cx >= shape["x0"]) & (cx < shape["x1"])
    return (cy - shape["cy"]) ** 2 + (cx - shape["cx"]) ** 2 <= shape["r"] ** 2


def _shapes_sample(rng: np.random.Generator, H: int, W: int) -> Sample:
    ys, xs = np.mgrid[0:H, 0:W]
    base = rng.uniform(0.1, 0.9, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
    img = (base[:, None, None] + tilt[:, 0, None, None] * (ys / H - 0.5)
           + tilt[:, 1, None, None] * (xs / W - 0.5))
    img = img + rng.normal(0, 0.03, size=(3, H, W))  # texture
    mask = np.zeros((H, W), dtype=np.int64)
    shapes = []
    for _ in range(int(rng.integers(1, 5))):
        kind = SHAPE_CLASSES[int(rng.integers(2))]
        color = rng.uniform(0, 1, size=3)
        if kind == "rectangle":
            hh, ww = rng.uniform(0.15, 0.5) * H, rng.uniform(0.15, 0.5) * W
            y0, x0 = rng.uniform(0, H - hh), rng.uniform(0, W - ww)
            shape = {"kind": kind, "y0": y0, "x0": x0, "y1": y0 + hh, "x1": x0 + ww}
        else:
            r = rng.uniform(0.1, 0.25) * min(H, W)
            shape = {"kind": kind, "cy": rng.uniform(r, H - r), "cx": rng.uniform(r, W - r), "r": r}
        inside = inside_shape(shape, ys, xs)
        img[:, inside] = color[:, None]
        mask[inside] = 1 + SHAPE_CLASSES.index(kind)
        shapes.append(shape)
    areas = [int((mask == 1 + k).sum()) for k in range(len(SHAPE_CLASSES))]
    label = int(np.argmax(areas))
    return Sample(np.clip(img, 0.0, 1.0), label, mask, shapes=shapes)


def _gradients_sample(rng: np.random.Generator, H: int, W: int) -> Sample:
    ys, xs = np.mgrid[0:H, 0:W]
    y, x = ys / H, xs / W
    a = rng.uniform(0.2, 0.8, size=3)
    b = rng.uniform(-0.5, 0.5, size=(3, 2))
    freq = rng.uniform(0.5, 2.0, size=3)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    img = (a[:, None, None] + b[:, 0, None, None] * (y - 0.5) + b[:, 1, None, None] * (x - 0.5)
           + 0.15 * np.sin(2 * math.pi * freq[:, None, None] * (x + y) / 2 + phase[:, None, None]))
    return Sample(np.clip(img, 0.0, 1.0))


GENERATORS = {"shapes": _shapes_sample, "gradients": _gradients_sample}
NUM_SEG_CLASSES = 1 + len(SHAPE_CLASSES)  # background + shape kinds


def synthesize(generator: str, n: int, H: int, W: int, seed: int) -> list[Sample]:
    """Seeded synthetic corpus; sample ``i`` depends only on (seed, i)."""
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    make = GENERATORS[generator]
    out = []
    for i in range(n):
        s = make(make_rng(seed, 0xDA7A, i), H, W)
        s.name = f"{i:06d}.ppm"
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# splitting and corpus directories


def split_indices(names: Sequence[str], ratio: float, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint, exhaustive train/validation split; a pure function of the sorted names and seed."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    order = sorted(range(len(names)), key=lambda i: names[i])
    perm = make_rng(seed, 0x5B17).permutation(len(order))
    shuffled = [order[i] for i in perm]
    k = int(round(ratio * len(names)))
    return sorted(shuffled[:k]), sorted(shuffled[k:])


def write_corpus(samples: Sequence[Sample], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    labels = []
    for s in samples:
        write_ppm(root / "images" / s.name, s.image)
        if s.label is not None:
            labels.append(f"{s.name}\t{s.label}\n")
        if s.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            write_pgm(root / "masks" / (Path(s.name).stem + ".pgm"), s.mask, raw=True)
    if labels:
        (root / "labels.tsv").write_text("".join(labels))


def read_corpus(root: str | Path, H: int, W: int) -> list[Sample]:
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise IngestionError(f"{root}: missing images/ directory")
    labels = {}
    if (root / "labels.tsv").exists():
        for line_no, line in enumerate((root / "labels.tsv").read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                name, cls = line.split("\t")
                labels[name] = int(cls)
            except ValueError as e:
                raise IngestionError(f"{root / 'labels.tsv'}:{line_no}: bad line {line!r}") from e
    samples = []
    for path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".png")):
        mask_path = root / "masks" / (path.stem + ".pgm")
        samples.append(load_and_resize(path, H, W, labels.get(path.name),
                                       mask_path if mask_path.exists() else None))
    return samples


def load_corpus(spec: CorpusSpec) -> list[Sample]:
    if spec.source in GENERATORS:
        return synthesize(spec.source, spec.n, spec.image_h, spec.image_w, spec.seed)
    return read_corpus(spec.source, spec.image_h, spec.image_w)


def train_val_split(samples: Sequence[Sample], spec: CorpusSpec) -> tuple[list[Sample], list[Sample]]:
    tr, va = split_indices([s.name for s in samples], spec.split, spec.seed)
    return [samples[i] for i in tr], [samples[i] for i in va]
