import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ame import tensor as T
from ame.model import (ConfigError, MaeModel, ModelConfig, load_checkpoint, patchify, read_checkpoint,
                       save_checkpoint, sincos_2d, unpatchify)
from ame.tensor import Tensor, gradient_check, precision
from ame.train import classification_loss, reconstruction_loss

from conftest import tiny_config


def test_patchify_row_major_order():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert patchify(img, 1).ravel().tolist() == [1, 2, 3, 4]


def test_patchify_constant_image_gives_identical_patches():
    p = patchify(np.full((3, 8, 8), 0.3), 4)
    assert np.all(p == p[0])


def test_patchify_round_trip_bit_exact():
    x = np.random.default_rng(0).random((3, 32, 16))
    p = patchify(x, 8)
    assert p.shape == (8, 192)
    assert np.array_equal(unpatchify(p, 8, 32, 16), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_patchify_round_trip_property(gh, gw, P, C):
    x = np.random.default_rng(gh * 100 + gw * 10 + P).random((C, gh * P, gw * P))
    assert np.array_equal(unpatchify(patchify(x, P), P, gh * P, gw * P), x)


def test_patchify_indivisible_is_config_error():
    with pytest.raises(ConfigError):
        patchify(np.zeros((3, 10, 8)), 4)


@pytest.mark.parametrize("bad", [dict(image_h=18), dict(enc_dim=18), dict(task="depth"),
                                 dict(task="classification", num_classes=1), dict(attention_source_layer=5),
                                 dict(entropy_source="qq")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad)


def test_config_dict_round_trip():
    c = tiny_config(task="segmentation", num_classes=3)
    assert ModelConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**c.to_dict(), "bogus": 1})


def test_sincos_cls_code_is_zero_and_rows_distinct():
    e = sincos_2d(16, 4, 4)
    assert e.shape == (17, 16) and np.all(e[0] == 0)
    assert len({tuple(np.round(r, 12)) for r in e[1:]}) == 16


def test_encode_full_visibility_shapes(tiny_model, images):
    c = tiny_model.config
    p = patchify(images, c.patch_size)
    lat, _, _ = tiny_model.encode(p, np.tile(np.arange(c.num_patches), (4, 1)))
    assert lat.shape == (4, c.num_patches + 1, c.enc_dim)


def test_encode_rejects_duplicate_positions(tiny_model, images):
    p = patchify(images[0], 4)[:2]
    with pytest.raises(ValueError, match="duplicate"):
        tiny_model.encode(p, np.array([3, 3]))


def test_pad_invariance(tiny_model, images):
    p = patchify(images[0], 4)
    pos = np.array([5, 9])
    alone, _, _ = tiny_model.encode(p[pos], pos)
    padded_pos = np.array([5, 9, 0, 0, 0])
    padded, _, _ = tiny_model.encode(p[padded_pos], padded_pos, np.array([True, True, False, False, False]))
    assert np.max(np.abs(alone.data[0] - padded.data[0, :3])) < 1e-5
    pred_a, _, _ = tiny_model.decode(alone, pos[None], np.ones((1, 2), bool))
    pred_b, _, _ = tiny_model.decode(padded, padded_pos[None], np.array([[True, True, False, False, False]]))
    assert np.max(np.abs(pred_a.data - pred_b.data)) < 1e-5


def test_pad_columns_get_exact_zero_attention(tiny_model, images):
    p = patchify(images, 4)
    known = np.zeros((4, 16), bool)
    known[0, :5] = True
    known[1, :2] = True
    out = tiny_model.forward(p, known, capture_all=True)
    enc = out.all_captures[0]
    assert np.all(enc.probs[1, :, :, 3:] == 0)
    assert np.all(enc.probs[2, :, :, 1:] == 0)
    assert np.allclose(enc.probs.sum(-1), 1, atol=1e-6)


def test_visible_order_invariance(tiny_model, images):
    p = patchify(images[1], 4)
    pos = np.array([2, 7, 11, 13])
    perm = np.array([2, 0, 3, 1])
    a, _, _ = tiny_model.encode(p[pos], pos)
    b, _, _ = tiny_model.encode(p[pos[perm]], pos[perm])
    assert np.max(np.abs(a.data[0, 1:][perm] - b.data[0, 1:])) < 1e-5
    assert np.max(np.abs(a.data[0, 0] - b.data[0, 0])) < 1e-5
    pa, _, _ = tiny_model.decode(a, pos[None], np.ones((1, 4), bool))
    pb, _, _ = tiny_model.decode(b, pos[perm][None], np.ones((1, 4), bool))
    assert np.max(np.abs(pa.data - pb.data)) < 1e-5


def test_decode_with_mask_tokens_only(tiny_model, images):
    c = tiny_model.config
    out = tiny_model.forward(patchify(images, 4), np.zeros((4, c.num_patches), bool))
    assert out.latents.shape == (4, 1, c.enc_dim)
    assert out.pred.shape == (4, c.num_patches, c.patch_dim)
    S = c.num_patches + 1
    assert out.capture.probs.shape == (4, c.dec_heads, S, S)
    assert np.allclose(out.capture.probs.sum(-1), 1, atol=1e-6)
    # no image content reaches a mask-only pass
    assert np.allclose(out.pred.data, out.pred.data[0], atol=1e-6)


def test_full_visibility_predicts_every_position(tiny_model, images):
    out = tiny_model.forward(patchify(images, 4), np.ones((4, 16), bool))
    assert out.pred.shape == (4, 16, 48)
    assert np.all(np.isfinite(out.capture.probs))


def test_kkt_source_rows_are_distributions(tiny_model, images):
    model = MaeModel(tiny_config(entropy_source="kkt"), seed=3)
    out = model.forward(patchify(images, 4), np.eye(16, dtype=bool)[:4])
    rows = out.capture.entropy_probs("kkt")
    assert rows.shape == out.capture.probs.shape
    assert np.allclose(rows.sum(-1), 1, atol=1e-6)
    # K K^T is symmetric before the softmax, so the logits matrix is too
    k = out.capture.keys
    s = k @ np.swapaxes(k, -1, -2)
    assert np.allclose(s, np.swapaxes(s, -1, -2))


def test_segmentation_head_width():
    m = MaeModel(tiny_config(task="segmentation", num_classes=3))
    out = m.forward(np.zeros((1, 16, 48), np.float32), np.zeros((1, 16), bool))
    assert out.pred.shape == (1, 16, 3 * 16)


def test_classify_head_zero_weights_uniform():
    m = MaeModel(tiny_config(task="classification", num_classes=4))
    for name, p in m.named_parameters():
        if name.startswith("cls_head"):
            p.data[...] = 0
    out = m.forward(np.random.default_rng(0).random((2, 16, 48)).astype(np.float32), np.ones((2, 16), bool))
    probs = T.softmax(out.logits).data
    assert np.allclose(probs, 0.25)


def test_classify_head_wrong_task(tiny_model):
    with pytest.raises(ConfigError):
        tiny_model.classify_head(Tensor(np.zeros((1, 16))))


def test_head_only_parameter_list():
    m = MaeModel(tiny_config(task="classification", num_classes=3, head_mode="head_only"))
    names = {id(p): n for n, p in m.named_parameters()}
    trainable = [names[id(p)] for p in m.trainable_parameters()]
    assert trainable and all(n.startswith("cls_head") for n in trainable)
    assert {"cls_head.0.w", "cls_head.1.w"} <= set(trainable)
    assert not any(n.startswith("enc.") for n in trainable)


def test_classification_head_gradient_matches_finite_differences():
    with precision(np.float64):
        m = MaeModel(tiny_config(task="classification", num_classes=3), seed=1).astype(np.float64)
        x = np.random.default_rng(2).random((2, 16, 48))
        known = np.zeros((2, 16), bool)
        known[:, :6] = True
        labels = np.array([0, 2])
        for name in ("cls_head.0.w", "cls_head.0.b"):
            p = m.params[name]

            def f(_):
                return classification_loss(m.forward(x, known).logits, labels)

            rep = gradient_check(f, p, step=1e-6, tolerance=1e-4)
            assert rep.passed, (name, rep)


MINI = dict(image_h=8, image_w=16, patch_size=4, channels=2, enc_layers=1, enc_dim=8, enc_heads=2,
            dec_layers=1, dec_dim=8, dec_heads=2, mlp_ratio=2)


def test_full_loss_gradient_on_miniature_config():
    with precision(np.float64):
        m = MaeModel(ModelConfig(**MINI), seed=5).astype(np.float64)
        # larger-than-default weights so every path carries a non-trivial gradient
        rng = np.random.default_rng(9)
        for _, p in m.named_parameters():
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
        x = patchify(rng.random((2, 2, 8, 16)), 4)
        known = np.array([[1, 0, 1, 0, 0, 1, 0, 0], [0, 1, 1, 1, 0, 0, 0, 1]], bool)

        def f(_):
            return reconstruction_loss(m.forward(x, known).pred, x)

        # the key bias has an exactly-zero gradient (softmax ignores a per-query shift); h=1e-5 keeps its
        # central-difference roundoff (~eps/h) under floor*tol while truncation stays O(h^2)
        for name, p in m.named_parameters():
            rep = gradient_check(f, p, step=1e-5, tolerance=1e-4)
            assert rep.passed, (name, rep.failures[:3])


def test_state_dict_round_trip_and_strict_load(tiny_model):
    other = MaeModel(tiny_model.config, seed=99)
    assert other.checksum() != tiny_model.checksum()
    other.load_state_dict(tiny_model.state_dict())
    assert other.checksum() == tiny_model.checksum()
    bad = tiny_model.state_dict()
    bad.pop("mask_token")
    with pytest.raises(ConfigError):
        other.load_state_dict(bad)


def test_with_source_layer_shares_weights(tiny_model, images):
    first = tiny_model.with_source_layer(0)
    assert first.config.attention_source_layer == 0
    assert first.params["dec.0.qkv.w"] is tiny_model.params["dec.0.qkv.w"]
    p = patchify(images, 4)
    known = np.zeros((4, 16), bool)
    a = first.forward(p, known, capture_all=True)
    assert np.array_equal(a.capture.probs, a.all_captures[tiny_model.config.enc_layers].probs)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, extra={"epoch": 3})
    cfg, state, extra = read_checkpoint(path)
    assert cfg == tiny_model.config and extra["epoch"] == 3
    loaded = load_checkpoint(path, expected=tiny_model.config)
    assert loaded.checksum() == tiny_model.checksum()
    assert path.read_bytes()[:8] == b"AMECKPT\x00"


def test_checkpoint_rejects_config_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected=tiny_model.config.replace(dec_layers=1))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises((ConfigError, ValueError)):
        read_checkpoint(path)
