"""Command-line entry point: ``ame {synth,train,explore,eval,config}``.

Config files are INI-style ``key = value`` lines grouped into the sections
``[model]``, ``[train]``, ``[glimpse]``, ``[corpus]`` and ``[run]``. Any key can
be overridden with ``--set section.key=value``. The resolved config is written
to ``<out>/config.resolved.ini`` before any work starts.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CorpusSpec, IngestionError, load_corpus, read_image, resize_bilinear, \
    synthesize, train_val_split, write_corpus, write_ppm
from .glimpse import GlimpseSpec, explore
from .model import ConfigError, MaeModel, ModelConfig, load_checkpoint, read_checkpoint, save_checkpoint
from .train import DivergenceError, TrainConfig, fit

log = logging.getLogger("ame")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


@dataclass
class RunOptions:
    selector: str = "attention"
    out: str = "runs/default"
    seed: int = 0
    threads: int = 0  # 0 leaves the BLAS default
    eval_seeds: int = 5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    glimpse: GlimpseSpec = field(default_factory=GlimpseSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    run: RunOptions = field(default_factory=RunOptions)

    @property
    def out(self) -> Path:
        return Path(self.run.out)

    @property
    def deterministic(self) -> bool:
        return self.run.threads == 1

    def to_ini(self) -> str:
        lines = []
        for section in ("model", "train", "glimpse", "corpus", "run"):
            lines.append(f"[{section}]")
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                if isinstance(value, tuple):
                    value = ",".join(repr(v) for v in value)
                lines.append(f"{f.name} = {value}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw: str, hint, name: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if raw in ("None", "none", "") and (type(None) in args):
        return None
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is typing.Literal:
        if raw not in args:
            raise ConfigError(f"{name}: {raw!r} not one of {args}")
        return raw
    if origin is tuple:
        return tuple(float(x) for x in raw.split(","))
    try:
        if hint is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def _build(cls, values: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = {k: _convert(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from None


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "glimpse": GlimpseSpec, "corpus": CorpusSpec,
            "run": RunOptions}


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            values[section].update(parser[section])
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"bad override {item!r}; expected section.key=value")
        values[section][name] = value
    cfg = RunConfig(**{s: _build(cls, values[s], s) for s, cls in SECTIONS.items()})
    if "seed" not in values["train"]:
        cfg.train.seed = cfg.run.seed
    cfg.glimpse.validate(cfg.model.patch_size, cfg.model.image_h, cfg.model.image_w)
    if (cfg.corpus.image_h, cfg.corpus.image_w) != (cfg.model.image_h, cfg.model.image_w):
        if "image_h" in values["corpus"] or "image_w" in values["corpus"]:
            raise ConfigError("corpus image size differs from the model image size")
        cfg.corpus.image_h, cfg.corpus.image_w = cfg.model.image_h, cfg.model.image_w
    return cfg


def echo_config(cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "config.resolved.ini").write_text(cfg.to_ini())


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    source = cfg.corpus.source
    if source not in ("shapes", "gradients"):
        raise ConfigError(f"synth needs a generator name as corpus.source, got {source!r}")
    samples = synthesize(source, cfg.corpus.n, cfg.corpus.image_h, cfg.corpus.image_w, cfg.corpus.seed)
    target = Path(args.corpus_dir) if args.corpus_dir else cfg.out / "corpus"
    write_corpus(samples, target)
    print(f"wrote {len(samples)} images to {target}")
    return EXIT_OK


def _corpus(cfg: RunConfig):
    samples = load_corpus(cfg.corpus)
    if not samples:
        raise IngestionError(f"corpus {cfg.corpus.source!r} is empty")
    return train_val_split(samples, cfg.corpus)


def cmd_train(cfg: RunConfig, args) -> int:
    train, val = _corpus(cfg)
    if args.head_only:
        if not args.checkpoint:
            raise ConfigError("--head-only needs --checkpoint pointing at a reconstruction model")
        base_cfg, state, _ = read_checkpoint(args.checkpoint)
        num_classes = cfg.model.num_classes or (1 + max(s.label for s in train if s.label is not None))
        model_cfg = base_cfg.replace(task="classification", num_classes=num_classes, head_mode="head_only")
        model = MaeModel(model_cfg, seed=cfg.run.seed)
        model.load_state_dict(state, strict=False)
    else:
        model = MaeModel(cfg.model, seed=cfg.run.seed)
        if args.checkpoint:
            _, state, _ = read_checkpoint(args.checkpoint)
            model.load_state_dict(state, strict=False)
    result = fit(model, train, val, cfg.train, cfg.glimpse, cfg.run.selector,
                 history_path=cfg.out / "history.jsonl", record_timing=not cfg.deterministic,
                 corpus_spec=cfg.corpus)
    save_checkpoint(model, cfg.out / "model.ckpt", {"best_epoch": result.best_epoch})
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}); checkpoint {cfg.out / 'model.ckpt'}")
    return EXIT_OK


PALETTE = np.array([[0.1, 0.1, 0.1], [0.9, 0.2, 0.2], [0.2, 0.4, 0.9], [0.2, 0.8, 0.3], [0.9, 0.8, 0.2]])


def _display(pred: np.ndarray, task: str) -> np.ndarray:
    if task == "segmentation":
        return PALETTE[np.asarray(pred) % len(PALETTE)].transpose(2, 0, 1)
    return np.clip(pred, 0, 1)


def _overlay(image: np.ndarray, anchor, spec: GlimpseSpec, P: int) -> np.ndarray:
    out = np.array(image, dtype=np.float64)
    r, c = anchor
    y0, x0, g = r * P, c * P, spec.glimpse_px
    red = np.array([1.0, 0.0, 0.0])[:, None]
    out[:, y0, x0: x0 + g] = red
    out[:, y0 + g - 1, x0: x0 + g] = red
    out[:, y0: y0 + g, x0] = red
    out[:, y0: y0 + g, x0 + g - 1] = red
    return out


def cmd_explore(cfg: RunConfig, args) -> int:
    from .evaluate import write_grid_pgm

    if not args.checkpoint:
        raise ConfigError("explore needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    c = model.config
    if args.image:
        image = np.clip(resize_bilinear(read_image(args.image), c.image_h, c.image_w), 0, 1)
        target, index = None, 0
    else:
        _, val = _corpus(cfg)
        index = args.index % len(val)
        sample = val[index]
        image = sample.image
        target = sample.label if c.task == "classification" else sample.mask
    if image.shape[0] != c.channels:
        raise IngestionError(f"image has {image.shape[0]} channels, model expects {c.channels}")
    report = explore(model, image, cfg.glimpse, cfg.run.selector, target, seed=cfg.run.seed, index=index)
    if cfg.deterministic:
        report.timing_ms = None
    out = cfg.out / "explore"
    out.mkdir(parents=True, exist_ok=True)
    P = c.patch_size
    heads = c.dec_heads
    scale = heads * np.log(c.num_patches + 1)
    for t, anchor in enumerate(report.anchors):
        write_ppm(out / f"step{t:02d}_input.ppm", report.inputs[t])
        write_ppm(out / f"step{t:02d}_pred.ppm", _display(report.predictions[t], c.task))
        write_grid_pgm(out / f"step{t:02d}_entropy.pgm", report.entropy_maps[t], P, scale)
        write_ppm(out / f"step{t:02d}_anchor.ppm", _overlay(report.inputs[t], anchor, cfg.glimpse, P))
    last = len(report.anchors)
    write_ppm(out / "final_input.ppm", report.inputs[last])
    write_ppm(out / "final_pred.ppm", _display(report.predictions[last], c.task))
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"{len(report.anchors)} glimpses, final loss {report.final_loss:.5f}; figures in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from . import evaluate as ev

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = load_checkpoint(args.checkpoint)
    _, val = _corpus(cfg)
    if args.limit:
        val = val[: args.limit]
    spec, seed, c = cfg.glimpse, cfg.run.seed, model.config
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    checksum = model.checksum()
    record, reports = ev.evaluate(model, val, spec, cfg.run.selector, seed)
    doc: dict = {"records": [record.to_dict()]}
    ev.write_tsv(out / "metrics.tsv", [{"selector": record.selector, "regime": record.regime,
                                        "pixel_percent": record.pixel_percent,
                                        "area_percent": record.area_percent, **record.metrics}])
    if args.sweep_glimpses:
        ts = list(range(spec.num_glimpses + 1))
        rows = ev.glimpse_sweep(model, val, spec, cfg.run.selector, ts, seed, reports=reports)
        doc["sweep_glimpses"] = rows
        ev.write_tsv(out / "sweep_glimpses.tsv", rows)
    if args.sweep_layers:
        rows = ev.layer_sweep(model, val, spec, seed)
        doc["sweep_layers"] = rows
        ev.write_tsv(out / "sweep_layers.tsv", rows)
    if args.ablate_selectors:
        rows = ev.ablate_selectors(model, val, spec, list(range(seed, seed + cfg.run.eval_seeds)))
        doc["ablation"] = rows
        ev.write_tsv(out / "ablation.tsv", rows)
    if args.glimpse_map:
        occ, first = ev.average_glimpse_map(reports, spec.footprint_side(c.patch_size))
        doc["glimpse_map"] = {"occupancy": occ.tolist(), "first": first.tolist()}
        ev.write_grid_pgm(out / "glimpse_map.pgm", occ, c.patch_size, 1.0)
        ev.write_grid_pgm(out / "first_glimpse_map.pgm", first, c.patch_size, 1.0)
    if model.checksum() != checksum:
        raise RuntimeError("evaluation modified the model weights")
    ev.write_json(out / "metrics.json", doc)
    ev.write_json(out / "metrics.schema.json", ev.METRICS_SCHEMA)
    print(json.dumps(record.metrics))
    return EXIT_OK


def cmd_config(cfg: RunConfig, args) -> int:
    print(cfg.to_ini())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "explore": cmd_explore, "eval": cmd_eval,
            "config": cmd_config}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ame", description="Attention-map-entropy active visual exploration")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a key")
        sp.add_argument("--out", help="output directory (run.out)")
        sp.add_argument("--seed", type=int, help="run seed (run.seed)")
        sp.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bit-exact runs")
        sp.add_argument("--selector", choices=["attention", "random", "checker"], help="glimpse selector")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("synth", help="write a synthetic corpus"))
    s.add_argument("--corpus-dir", help="target directory (default <out>/corpus)")
    s = common(sub.add_parser("train", help="train a model"))
    s.add_argument("--checkpoint", help="initial weights (backbone for --head-only)")
    s.add_argument("--head-only", action="store_true", help="train a classification head on frozen features")
    s = common(sub.add_parser("explore", help="one episode with per-step figure dumps"))
    s.add_argument("--checkpoint")
    s.add_argument("--image", help="image file; default is a validation image picked by --index")
    s.add_argument("--index", type=int, default=0)
    s = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    s.add_argument("--checkpoint")
    s.add_argument("--limit", type=int, default=0, help="evaluate at most this many images")
    s.add_argument("--sweep-glimpses", action="store_true")
    s.add_argument("--sweep-layers", action="store_true")
    s.add_argument("--ablate-selectors", action="store_true")
    s.add_argument("--glimpse-map", action="store_true")
    common(sub.add_parser("config", help="print the resolved config"))
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = list(args.set)
    for flag, key in (("out", "run.out"), ("seed", "run.seed"), ("threads", "run.threads"),
                      ("selector", "run.selector")):
        if getattr(args, flag) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    try:
        cfg = load_config(args.config, overrides)
        echo_config(cfg)
        if cfg.run.threads > 0:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=cfg.run.threads):
                return COMMANDS[args.command](cfg, args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, FloatingPointError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
