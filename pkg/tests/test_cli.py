import json

import jsonschema
import numpy as np
import pytest

from ame.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, load_config, main
from ame.data import read_pnm, write_ppm
from ame.model import ConfigError, MaeModel, load_checkpoint, save_checkpoint

SMALL = """\
[model]
image_h = 16
image_w = 16
patch_size = 4
enc_layers = 2
enc_dim = 16
enc_heads = 2
dec_layers = 2
dec_dim = 16
dec_heads = 2
mlp_ratio = 2

[train]
epochs = 2
warmup_epochs = 1
lr_max = 1e-3
batch_size = 4

[glimpse]
glimpse_px = 4
num_glimpses = 3

[corpus]
source = shapes
n = 12
split = 0.75
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return p


def run(cfg_file, out, *extra):
    return main([extra[0], "--config", str(cfg_file), "--out", str(out), *extra[1:]])


def test_config_overrides_and_echo(cfg_file, tmp_path):
    cfg = load_config(cfg_file, ["train.epochs=5", "run.selector=random", "train.betas=0.8,0.9"])
    assert cfg.train.epochs == 5 and cfg.run.selector == "random" and cfg.train.betas == (0.8, 0.9)
    assert cfg.corpus.image_h == 16
    assert run(cfg_file, tmp_path / "o", "config") == 0
    echoed = (tmp_path / "o" / "config.resolved.ini").read_text()
    assert "epochs = 2" in echoed and "glimpse_px = 4" in echoed
    again = load_config(tmp_path / "o" / "config.resolved.ini")
    assert again == load_config(cfg_file, [f"run.out={tmp_path / 'o'}"])


@pytest.mark.parametrize("override", ["model.bogus=1", "train.epochs=abc", "glimpse.glimpse_px=6",
                                      "nosuch.key=1", "train.warmup_epochs=9", "model.task=depth"])
def test_config_errors(cfg_file, tmp_path, override):
    with pytest.raises(ConfigError):
        load_config(cfg_file, [override])
    assert run(cfg_file, tmp_path, "config", "--set", override) == EXIT_CONFIG


def test_synth_writes_corpus_byte_identically(cfg_file, tmp_path):
    for k in range(2):
        assert run(cfg_file, tmp_path / f"r{k}", "synth", "--set", "corpus.n=10") == 0
    a, b = tmp_path / "r0" / "corpus", tmp_path / "r1" / "corpus"
    images = sorted((a / "images").glob("*.ppm"))
    assert len(images) == 10 and len(list((a / "masks").glob("*.pgm"))) == 10
    assert len((a / "labels.tsv").read_text().splitlines()) == 10
    for f in sorted(a.rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (b / f.relative_to(a)).read_bytes()


def test_synth_needs_generator(cfg_file, tmp_path):
    assert run(cfg_file, tmp_path, "synth", "--set", "corpus.source=/some/dir") == EXIT_CONFIG


def _train(cfg_file, out, *extra):
    return run(cfg_file, out, "train", "--threads", "1", *extra)


def test_train_from_synthesized_directory(cfg_file, tmp_path, recwarn):
    assert run(cfg_file, tmp_path / "s", "synth") == 0
    corpus = tmp_path / "s" / "corpus"
    assert _train(cfg_file, tmp_path / "t", "--set", f"corpus.source={corpus}") == 0
    assert not [w for w in recwarn if "ame" in str(w.filename)]
    hist = (tmp_path / "t" / "history.jsonl").read_text().splitlines()
    assert len(hist) == 2
    assert all(json.loads(line)["wall_ms"] is None for line in hist)
    assert (tmp_path / "t" / "model.ckpt").exists()


def test_train_and_explore_are_byte_identical(cfg_file, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert _train(cfg_file, out) == 0
        assert run(cfg_file, out, "explore", "--threads", "1", "--checkpoint", str(out / "model.ckpt")) == 0
        outs.append(out)
    assert (outs[0] / "history.jsonl").read_bytes() == (outs[1] / "history.jsonl").read_bytes()
    assert (outs[0] / "model.ckpt").read_bytes() == (outs[1] / "model.ckpt").read_bytes()
    files = sorted(p.name for p in (outs[0] / "explore").iterdir())
    assert files == sorted(p.name for p in (outs[1] / "explore").iterdir())
    for name in files:
        assert (outs[0] / "explore" / name).read_bytes() == (outs[1] / "explore" / name).read_bytes(), name


@pytest.fixture
def checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    cfg = load_config(None, ["model.image_h=16", "model.image_w=16", "model.patch_size=4", "model.enc_dim=16",
                             "model.enc_heads=2", "model.enc_layers=2", "model.dec_dim=16", "model.dec_heads=2",
                             "model.mlp_ratio=2", "glimpse.glimpse_px=4"])
    save_checkpoint(MaeModel(cfg.model, seed=1), path)
    return path


def test_explore_dumps(cfg_file, tmp_path, checkpoint):
    out = tmp_path / "e"
    assert run(cfg_file, out, "explore", "--checkpoint", str(checkpoint), "--set", "glimpse.num_glimpses=8",
               "--selector", "random") == 0
    d = out / "explore"
    for t in range(8):
        for kind in ("input.ppm", "pred.ppm", "entropy.pgm", "anchor.ppm"):
            assert (d / f"step{t:02d}_{kind}").exists()
    assert (d / "final_input.ppm").exists() and (d / "final_pred.ppm").exists()
    report = json.loads((d / "report.json").read_text())
    assert len(report["anchors"]) == 8
    known = np.zeros((4, 4), bool)
    for t, (r, c) in enumerate(report["anchors"]):
        ent = read_pnm(d / f"step{t:02d}_entropy.pgm")[0]
        cells = ent.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3)
        assert np.all(cells[known] == 0)
        known[r, c] = True


def test_explore_image_file(cfg_file, tmp_path, checkpoint):
    write_ppm(tmp_path / "img.ppm", np.random.default_rng(0).random((3, 40, 24)))
    assert run(cfg_file, tmp_path / "x", "explore", "--checkpoint", str(checkpoint), "--image",
               str(tmp_path / "img.ppm")) == 0


def test_eval_outputs_validate_against_schema(cfg_file, tmp_path, checkpoint):
    out = tmp_path / "ev"
    assert run(cfg_file, out, "eval", "--checkpoint", str(checkpoint), "--sweep-glimpses", "--sweep-layers",
               "--ablate-selectors", "--glimpse-map", "--set", "run.eval_seeds=2") == 0
    d = out / "eval"
    doc = json.loads((d / "metrics.json").read_text())
    jsonschema.validate(doc, json.loads((d / "metrics.schema.json").read_text()))
    assert [r["selector"] for r in doc["ablation"]] == ["attention", "random", "checker"]
    assert len(doc["sweep_layers"]) == 2
    assert [r["t"] for r in doc["sweep_glimpses"]] == [0, 1, 2, 3]
    assert (d / "ablation.tsv").read_text().splitlines()[0].startswith("selector\tregime")
    assert (d / "glimpse_map.pgm").exists()


def test_head_only_classifier_from_reconstruction_checkpoint(cfg_file, tmp_path, checkpoint):
    out = tmp_path / "h"
    assert _train(cfg_file, out, "--checkpoint", str(checkpoint), "--head-only") == 0
    base, head = load_checkpoint(checkpoint), load_checkpoint(out / "model.ckpt")
    assert head.config.task == "classification" and head.config.head_mode == "head_only"
    for name, p in base.named_parameters():
        assert np.array_equal(p.data, head.params[name].data), name


def test_exit_codes(cfg_file, tmp_path, checkpoint):
    assert run(cfg_file, tmp_path, "eval") == EXIT_CONFIG
    assert run(cfg_file, tmp_path, "train", "--set", f"corpus.source={tmp_path / 'missing'}") == EXIT_DATA
    assert run(cfg_file, tmp_path, "eval", "--checkpoint", str(tmp_path / "nope.ckpt")) == EXIT_DATA
    with np.errstate(all="ignore"):
        assert run(cfg_file, tmp_path, "train", "--set", "train.lr_max=1e30") == EXIT_DIVERGED
    assert run(cfg_file, tmp_path, "eval", "--checkpoint", str(checkpoint), "--set", "model.image_h=32",
               "--set", "corpus.image_h=16") == EXIT_CONFIG
