"""Toy-scale masked autoencoder with attention capture.

The encoder sees only the known patches (plus a CLS token, plus pad tokens
when batch entries have different numbers of known patches). The decoder sees
the full grid: projected latents at known positions and a learned mask token
everywhere else. Post-softmax attention probabilities of one decoder layer are
captured for glimpse selection.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASKS = ("reconstruction", "classification", "segmentation")


class ConfigError(ValueError):
    """Inconsistent configuration."""


@dataclass
class ModelConfig:
    image_h: int = 64
    image_w: int = 64
    patch_size: int = 8
    channels: int = 3
    enc_layers: int = 4
    enc_dim: int = 128
    enc_heads: int = 4
    dec_layers: int = 2
    dec_dim: int = 64
    dec_heads: int = 4
    mlp_ratio: float = 4.0
    task: str = "reconstruction"
    num_classes: int = 0
    head_mode: Literal["train_all", "head_only"] = "train_all"
    attention_source_layer: int = -1  # negative counts from the last decoder layer
    entropy_source: Literal["attention", "kkt"] = "attention"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        P = self.patch_size
        if P <= 0 or self.image_h % P or self.image_w % P:
            raise ConfigError(f"image {self.image_h}x{self.image_w} not divisible by patch size {P}")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ConfigError("embedding dims must be divisible by head counts")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ConfigError("embedding dims must be multiples of 4 for 2-D sin-cos codes")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task != "reconstruction" and self.num_classes < 2:
            raise ConfigError(f"task {self.task} needs num_classes >= 2")
        if self.head_mode not in ("train_all", "head_only"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.entropy_source not in ("attention", "kkt"):
            raise ConfigError(f"unknown entropy_source {self.entropy_source!r}")
        if self.dec_layers < 1 or self.enc_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if not -self.dec_layers <= self.attention_source_layer < self.dec_layers:
            raise ConfigError(f"attention_source_layer {self.attention_source_layer} "
                              f"outside [0, {self.dec_layers})")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def source_layer(self) -> int:
        return self.attention_source_layer % self.dec_layers

    @property
    def out_channels(self) -> int:
        """C' of the per-patch decoder head."""
        return self.num_classes if self.task == "segmentation" else self.channels

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttentionCapture:
    """Post-softmax attention of one layer: ``probs[b, h, query, key]``."""

    layer: int
    probs: np.ndarray  # (B, heads, S, S)
    key_mask: np.ndarray | None = None  # (B, S), False marks pad tokens
    keys: np.ndarray | None = None  # (B, heads, S, d_k)

    @property
    def heads(self) -> int:
        return self.probs.shape[1]

    def entropy_probs(self, source: str = "attention") -> np.ndarray:
        """Rows whose entropy drives selection: the attention itself, or softmax(K K^T / sqrt(d_k))."""
        if source == "attention":
            return self.probs
        k = self.keys
        scores = k @ np.swapaxes(k, -1, -2) / np.sqrt(k.shape[-1])
        mask = None if self.key_mask is None else self.key_mask[:, None, None, :]
        return T.softmax_np(scores, -1, mask)


# ---------------------------------------------------------------------------
# patches and positional codes


def patchify(image: np.ndarray, P: int) -> np.ndarray:
    """(C, H, W) or (B, C, H, W) -> (N, P*P*C) or (B, N, P*P*C), row-major patch grid."""
    batched = image.ndim == 4
    x = image if batched else image[None]
    B, C, H, W = x.shape
    if H % P or W % P:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {P}")
    gh, gw = H // P, W // P
    x = x.reshape(B, C, gh, P, gw, P).transpose(0, 2, 4, 3, 5, 1).reshape(B, gh * gw, P * P * C)
    return x if batched else x[0]


def unpatchify(patches: np.ndarray, P: int, H: int, W: int) -> np.ndarray:
    batched = patches.ndim == 3
    x = patches if batched else patches[None]
    B, N, D = x.shape
    C = D // (P * P)
    gh, gw = H // P, W // P
    if gh * gw != N:
        raise ConfigError(f"{N} patches do not tile a {H}x{W} image with P={P}")
    x = x.reshape(B, gh, gw, P, P, C).transpose(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)
    return x if batched else x[0]


def sincos_2d(dim: int, gh: int, gw: int, cls_token: bool = True) -> np.ndarray:
    """Fixed 2-D sine-cosine codes; half the channels encode the row, half the column."""
    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    emb = np.concatenate([one_axis(dim // 2, rows.reshape(-1)), one_axis(dim // 2, cols.reshape(-1))], axis=1)
    if cls_token:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of integers (split by adding key parts)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(s) for s in seed_parts])))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(size=shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardOutput:
    pred: Tensor | None  # (B, N, C' * P * P) per-patch head output; None for head-only classification
    logits: Tensor | None  # (B, num_classes) for classification
    capture: AttentionCapture
    latents: Tensor  # (B, 1 + t_max, E) encoder output
    all_captures: list[AttentionCapture] | None = None


class MaeModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = make_rng(seed, 0x5EED)
        c = config
        dt = T.default_dtype()

        def dense(name, n_in, n_out):
            self.params[f"{name}.w"] = Tensor(trunc_normal(rng, (n_in, n_out)), requires_grad=True, dtype=dt)
            self.params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, dtype=dt)

        def norm(name, n):
            self.params[f"{name}.w"] = Tensor(np.ones(n), requires_grad=True, dtype=dt)
            self.params[f"{name}.b"] = Tensor(np.zeros(n), requires_grad=True, dtype=dt)

        def block(prefix, dim):
            hidden = int(dim * c.mlp_ratio)
            norm(f"{prefix}.norm1", dim)
            dense(f"{prefix}.qkv", dim, 3 * dim)
            dense(f"{prefix}.proj", dim, dim)
            norm(f"{prefix}.norm2", dim)
            dense(f"{prefix}.fc1", dim, hidden)
            dense(f"{prefix}.fc2", hidden, dim)

        dense("patch_embed", c.patch_dim, c.enc_dim)
        self.params["cls_token"] = Tensor(trunc_normal(rng, (1, 1, c.enc_dim)), requires_grad=True, dtype=dt)
        for i in range(c.enc_layers):
            block(f"enc.{i}", c.enc_dim)
        norm("enc_norm", c.enc_dim)
        dense("dec_embed", c.enc_dim, c.dec_dim)
        self.params["mask_token"] = Tensor(trunc_normal(rng, (1, 1, c.dec_dim)), requires_grad=True, dtype=dt)
        for i in range(c.dec_layers):
            block(f"dec.{i}", c.dec_dim)
        norm("dec_norm", c.dec_dim)
        dense("pred_head", c.dec_dim, c.out_channels * c.patch_size ** 2)
        if c.task == "classification":
            if c.head_mode == "head_only":
                dense("cls_head.0", c.enc_dim, c.enc_dim)
                dense("cls_head.1", c.enc_dim, c.num_classes)
            else:
                dense("cls_head.0", c.enc_dim, c.num_classes)

        gh, gw = c.grid
        self.enc_pos = sincos_2d(c.enc_dim, gh, gw).astype(dt)
        self.dec_pos = sincos_2d(c.dec_dim, gh, gw).astype(dt)

    # -- parameter bookkeeping --------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith("cls_head.")]

    def trainable_parameters(self) -> list[Tensor]:
        """Head weights only in head-only classification; everything otherwise."""
        if self.config.task == "classification" and self.config.head_mode == "head_only":
            return self.head_parameters()
        return self.parameters()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if name not in self.params:
                continue
            p = self.params[name]
            if p.shape != value.shape:
                raise ConfigError(f"shape mismatch for {name}: {p.shape} vs {value.shape}")
            p.data = np.array(value, dtype=p.dtype)

    def astype(self, dtype) -> "MaeModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        self.enc_pos = self.enc_pos.astype(dtype)
        self.dec_pos = self.dec_pos.astype(dtype)
        return self

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def with_source_layer(self, layer: int) -> "MaeModel":
        """Same weights (shared, not copied), different attention source layer."""
        other = object.__new__(MaeModel)
        other.__dict__.update(self.__dict__)
        other.config = self.config.replace(attention_source_layer=layer)
        return other

    # -- building blocks ------------------------------------------------

    def _lin(self, x, name):
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, x, name):
        return T.layer_norm(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _block(self, x: Tensor, prefix: str, heads: int, key_mask: np.ndarray | None,
               capture: bool) -> tuple[Tensor, AttentionCapture | None]:
        B, S, D = x.shape
        dh = D // heads
        h = self._norm(x, f"{prefix}.norm1")
        qkv = self._lin(h, f"{prefix}.qkv").reshape(B, S, 3, heads, dh)
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        attn = T.softmax(scores, -1, mask)
        out = T.matmul(attn, v)  # (B, heads, S, dh)
        out = T.transpose(out, (0, 2, 1, 3)).reshape(B, S, D)
        x = x + self._lin(out, f"{prefix}.proj")
        h = self._norm(x, f"{prefix}.norm2")
        x = x + self._lin(T.gelu(self._lin(h, f"{prefix}.fc1")), f"{prefix}.fc2")
        cap = None
        if capture:
            cap = AttentionCapture(layer=-1, probs=attn.data, key_mask=key_mask, keys=k.data)
        return x, cap

    # -- forward passes ---------------------------------------------------

    def encode(self, patches: np.ndarray, positions: np.ndarray, valid: np.ndarray | None = None,
               capture_all: bool = False) -> tuple[Tensor, np.ndarray, list[AttentionCapture]]:
        """Encode visible patches.

        ``patches`` is (B, t, P*P*C) (or (t, P*P*C)), ``positions`` the matching
        grid indices, ``valid`` marks real (non-pad) slots. Returns latents of
        shape (B, 1 + t, E) with CLS first, the key mask used, and encoder
        attention captures when requested.
        """
        c = self.config
        patches = np.asarray(patches)
        positions = np.asarray(positions, dtype=np.intp)
        if patches.ndim == 2:
            patches, positions = patches[None], positions[None]
            valid = None if valid is None else np.asarray(valid)[None]
        B, t = positions.shape
        if valid is None:
            valid = np.ones((B, t), dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if t > c.num_patches:
            raise ValueError(f"{t} visible patches exceed grid of {c.num_patches}")
        for b in range(B):
            pos = positions[b][valid[b]]
            if len(np.unique(pos)) != len(pos):
                raise ValueError("duplicate visible patch positions")
            if len(pos) and (pos.min() < 0 or pos.max() >= c.num_patches):
                raise ValueError("patch position outside the grid")
        dt = self.params["cls_token"].dtype
        cls = T.broadcast_to(self.params["cls_token"], (B, 1, c.enc_dim))
        if t:
            safe_pos = np.where(valid, positions, 0)
            x = self._lin(np.where(valid[..., None], patches, 0).astype(dt), "patch_embed")
            x = x + np.where(valid[..., None], self.enc_pos[1 + safe_pos], 0).astype(dt)
            x = T.concat([cls, x], axis=1)
        else:
            x = cls
        key_mask = np.concatenate([np.ones((B, 1), dtype=bool), valid], axis=1)
        use_mask = None if key_mask.all() else key_mask
        caps = []
        for i in range(c.enc_layers):
            x, cap = self._block(x, f"enc.{i}", c.enc_heads, use_mask, capture_all)
            if cap is not None:
                cap.layer, cap.key_mask = i, key_mask
                caps.append(cap)
        return self._norm(x, "enc_norm"), key_mask, caps

    def decode(self, latents: Tensor, positions: np.ndarray, valid: np.ndarray,
               capture_all: bool = False) -> tuple[Tensor, AttentionCapture, list[AttentionCapture]]:
        """Decode the full grid from encoder latents.

        Unknown positions receive the mask token; every position gets its
        positional code. Returns per-position head output (B, N, C'*P*P) with
        the CLS output dropped, the capture of the configured source layer,
        and all decoder captures when requested.
        """
        c = self.config
        B = latents.shape[0]
        t = positions.shape[1] if positions.ndim == 2 else 0
        N = c.num_patches
        y = self._lin(latents, "dec_embed")  # (B, 1 + t, D)
        mask_tok = T.broadcast_to(self.params["mask_token"], (B, 1, c.dec_dim))
        y = T.concat([y, mask_tok], axis=1)  # mask token sits at slot 1 + t
        index = np.full((B, N + 1), 1 + t, dtype=np.intp)
        index[:, 0] = 0
        for b in range(B):
            slots = np.flatnonzero(valid[b])
            index[b, 1 + positions[b, slots]] = 1 + slots
        y = T.gather_rows(y, index) + self.dec_pos
        src = c.source_layer
        caps, chosen = [], None
        for i in range(c.dec_layers):
            want = capture_all or i == src
            y, cap = self._block(y, f"dec.{i}", c.dec_heads, None, want)
            if cap is not None:
                cap.layer = i
                caps.append(cap)
                if i == src:
                    chosen = cap
        y = self._norm(y, "dec_norm")
        pred = self._lin(y[:, 1:], "pred_head")
        return pred, chosen, caps

    def classify_head(self, cls_latent: Tensor) -> Tensor:
        if self.config.task != "classification":
            raise ConfigError(f"classify_head needs task=classification, got {self.config.task}")
        if self.config.head_mode == "head_only":
            return self._lin(T.gelu(self._lin(cls_latent, "cls_head.0")), "cls_head.1")
        return self._lin(cls_latent, "cls_head.0")

    def forward(self, patches: np.ndarray, known: np.ndarray, capture_all: bool = False) -> ForwardOutput:
        """Full pass from all patches (B, N, P*P*C) and a known mask (B, N).

        Only the known patches reach the encoder; batch entries with fewer
        known patches are padded. Zero known patches runs the decoder on mask
        tokens only.
        """
        known = np.asarray(known, dtype=bool)
        if known.ndim == 1:
            known = known[None]
        B = known.shape[0]
        counts = known.sum(axis=1)
        t_max = int(counts.max()) if B else 0
        positions = np.zeros((B, t_max), dtype=np.intp)
        valid = np.zeros((B, t_max), dtype=bool)
        for b in range(B):
            idx = np.flatnonzero(known[b])
            positions[b, : len(idx)] = idx
            valid[b, : len(idx)] = True
        rows = np.arange(B)[:, None]
        vis = patches[rows, positions] if t_max else np.zeros((B, 0, patches.shape[-1]), patches.dtype)
        latents, key_mask, enc_caps = self.encode(vis, positions, valid, capture_all)
        pred, cap, dec_caps = self.decode(latents, positions, valid, capture_all)
        logits = self.classify_head(latents[:, 0]) if self.config.task == "classification" else None
        return ForwardOutput(pred=pred, logits=logits, capture=cap, latents=latents,
                             all_captures=(enc_caps + dec_caps) if capture_all else None)


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"AMECKPT\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}
_CODE_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(model: MaeModel, path: str | Path, extra: dict | None = None) -> None:
    """Header (magic, version, JSON config) then named little-endian parameter blobs."""
    buf = io.BytesIO()
    header = json.dumps({"model": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<"))
        raw = name.encode()
        buf.write(struct.pack("<HBB", len(raw), _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off: off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        nlen, code, ndim = struct.unpack_from("<HBB", data, off)
        off += 4
        name = data[off: off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES[code]
        n = int(np.prod(shape)) * dtype.itemsize
        state[name] = np.frombuffer(data[off: off + n], dtype=dtype).reshape(shape).copy()
        off += n
    return ModelConfig.from_dict(header["model"]), state, header.get("extra", {})


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> MaeModel:
    """Load a model; rejects a stored config that differs from ``expected``."""
    config, state, _ = read_checkpoint(path)
    if expected is not None and expected != config:
        diff = {k: (v, getattr(expected, k)) for k, v in config.to_dict().items() if getattr(expected, k) != v}
        raise ConfigError(f"checkpoint config mismatch (stored, expected): {diff}")
    dtype = next(iter(state.values())).dtype if state else np.float32
    with T.precision(dtype):
        model = MaeModel(config)
    model.load_state_dict(state)
    return model
