import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ame.glimpse import (ConsistencyError, EntropyMap, ExplorationComplete, ExplorationState, GlimpseSpec,
                         apply_glimpse, composite, entropy_map, entropy_values, explore, explore_batch,
                         extract_glimpse, extract_retinal_glimpse, get_selector, row_entropy, select_ame,
                         select_checkerboard, select_random)
from ame.model import ConfigError, MaeModel, make_rng, patchify

from conftest import tiny_config

ONE = GlimpseSpec(glimpse_px=1, num_glimpses=1)


def test_row_entropy_values_from_hand_computation():
    h = row_entropy(np.array([[0.9, 0, 0.1, 0], [0.2, 0.3, 0.3, 0.2]]))
    expected = [-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)),
                -(2 * 0.2 * math.log(0.2) + 2 * 0.3 * math.log(0.3))]
    assert np.allclose(h, expected, atol=1e-12)
    assert h[0] == pytest.approx(0.3251, abs=1e-3)
    assert h[1] == pytest.approx(1.3662, abs=1e-3)


def test_higher_entropy_row_wins_selection():
    probs = np.array([[[0.25, 0.25, 0.25, 0.25],
                       [0.9, 0.0, 0.1, 0.0],
                       [0.2, 0.3, 0.3, 0.2],
                       [0.0, 1.0, 0.0, 0.0]]])
    emap = entropy_map(probs, np.zeros((1, 3), bool))
    assert np.allclose(emap.values, [[0.3251, 1.3662, 0.0]], atol=1e-3)
    assert select_ame(emap, ONE, np.zeros((1, 3), bool), 1) == (0, 1)


def test_uniform_rows_give_ln_s():
    probs = np.full((1, 5, 5), 0.2)
    v = entropy_values(probs, np.zeros((2, 2), bool))
    assert np.allclose(v, math.log(5))


def test_one_hot_rows_give_zero():
    probs = np.tile(np.eye(5), (2, 1, 1))
    assert np.all(entropy_values(probs, np.zeros((2, 2), bool)) == 0)


def test_known_positions_zeroed_and_heads_summed():
    probs = np.full((3, 5, 5), 0.2)
    known = np.array([[True, False], [False, True]])
    v = entropy_values(probs, known)
    assert np.all(v[known] == 0)
    assert np.allclose(v[~known], 3 * math.log(5))


def test_unnormalized_rows_raise():
    probs = np.full((1, 5, 5), 0.21)
    with pytest.raises(ConsistencyError):
        entropy_values(probs, np.zeros((2, 2), bool))


def test_row_count_must_match_grid():
    with pytest.raises(ValueError):
        entropy_values(np.full((1, 4, 4), 0.25), np.zeros((2, 2), bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_entropy_bounds(seed, heads):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=rng.uniform(0.1, 10), size=(heads, 10, 10))
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    known = rng.random((3, 3)) < 0.4
    v = entropy_values(probs, known)
    assert np.all(v >= 0) and np.all(v <= heads * math.log(10))
    assert np.all(v[known] == 0)


def test_select_ame_single_maximum():
    e = np.zeros((4, 5))
    e[2, 3] = 1.0
    assert select_ame(e, ONE, np.zeros((4, 5), bool), 1) == (2, 3)


def test_select_ame_tie_breaks_to_first_anchor():
    assert select_ame(np.ones((4, 4)), ONE, np.zeros((4, 4), bool), 1) == (0, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_select_ame_matches_brute_force_2x2(seed):
    rng = np.random.default_rng(seed)
    e = rng.random((4, 4))
    known = np.zeros((4, 4), bool)
    spec = GlimpseSpec(glimpse_px=2, num_glimpses=1)
    best, best_val = None, -np.inf
    for r in range(3):
        for c in range(3):
            v = e[r: r + 2, c: c + 2].mean()
            if v > best_val:
                best, best_val = (r, c), v
    assert select_ame(e, spec, known, 1) == best


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_select_ame_footprint_one_is_argmax(seed):
    rng = np.random.default_rng(seed)
    e = rng.random((3, 5))
    r, c = np.unravel_index(np.argmax(e), e.shape)
    assert select_ame(e, ONE, np.zeros((3, 5), bool), 1) == (r, c)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_select_ame_avoids_fully_known_footprints(seed):
    rng = np.random.default_rng(seed)
    known = rng.random((4, 4)) < 0.7
    if known.all():
        known[3, 3] = False
    e = np.where(known, 0.0, rng.random((4, 4)) * (rng.random((4, 4)) < 0.5))
    spec = GlimpseSpec(glimpse_px=2, num_glimpses=1)
    r, c = select_ame(e, spec, known, 1)
    assert not known[r: r + 2, c: c + 2].all()


def test_select_ame_exhausted():
    with pytest.raises(ExplorationComplete):
        select_ame(np.zeros((2, 2)), ONE, np.ones((2, 2), bool), 1)


def test_select_random_single_anchor():
    spec = GlimpseSpec(glimpse_px=4, num_glimpses=1)
    rng = make_rng(0)
    assert {select_random(spec, np.zeros((4, 4), bool), rng, 1) for _ in range(20)} == {(0, 0)}


def test_select_random_uniform_chi_square():
    spec = GlimpseSpec(glimpse_px=2, num_glimpses=1)
    known = np.zeros((4, 5), bool)
    rng = make_rng(1234)
    n = 100_000
    counts = np.zeros((3, 4))
    for _ in range(n):
        r, c = select_random(spec, known, rng, 1)
        counts[r, c] += 1
    expected = n / counts.size
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 11 degrees of freedom: the 0.99 quantile is 24.725
    assert chi2 < 24.725


def test_select_random_seeded():
    spec = GlimpseSpec(glimpse_px=1, num_glimpses=1)
    known = np.zeros((5, 5), bool)
    a = [select_random(spec, known, make_rng(7), 1) for _ in range(3)]
    r1, r2 = make_rng(7), make_rng(7)
    assert [select_random(spec, known, r1, 1) for _ in range(10)] == [select_random(spec, known, r2, 1)
                                                                      for _ in range(10)]
    assert len(set(a)) == 1


def test_checkerboard_even_cells_first():
    known = np.zeros((4, 4), bool)
    rng = make_rng(5)
    picks = []
    for _ in range(8):
        r, c = select_checkerboard(ONE, known, rng, 1)
        known[r, c] = True
        picks.append((r, c))
    assert len(set(picks)) == 8
    assert all((r + c) % 2 == 0 for r, c in picks)
    r, c = select_checkerboard(ONE, known, rng, 1)
    assert (r + c) % 2 == 1


def test_checkerboard_never_overlaps_and_exhausts():
    spec = GlimpseSpec(glimpse_px=2, num_glimpses=1)
    known = np.zeros((6, 4), bool)
    rng = make_rng(6)
    for t in range(1, 7):
        r, c = select_checkerboard(spec, known, rng, 1)
        assert not known[r: r + 2, c: c + 2].any()
        known[r: r + 2, c: c + 2] = True
        assert known.sum() == 4 * t
    with pytest.raises(ExplorationComplete):
        select_checkerboard(spec, known, rng, 1)


def test_checkerboard_seeded_order():
    def run(seed):
        known, rng, out = np.zeros((4, 4), bool), make_rng(seed), []
        for _ in range(16):
            r, c = select_checkerboard(ONE, known, rng, 1)
            known[r, c] = True
            out.append((r, c))
        return out

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_selector_registry():
    assert get_selector("ame").name == "attention"
    assert get_selector("checkerboard").name == "checker"
    assert not get_selector("random").needs_entropy
    with pytest.raises(ConfigError):
        get_selector("oracle")


def test_retinal_accounting_matches_regime_table():
    retinal = GlimpseSpec(kind="retinal", glimpse_px=48, levels=3, num_glimpses=8)
    retinal.validate(16, 128, 256)
    assert retinal.source_pixels(16) == 768
    assert retinal.pixel_percent(128, 256, 16) == 18.75
    assert retinal.area_percent(128, 256) == 56.25
    assert retinal.regime == "8x48^2 (RETINAL)"
    big = GlimpseSpec(glimpse_px=32, num_glimpses=8)
    assert (big.pixel_percent(128, 256, 16), big.area_percent(128, 256)) == (25.0, 25.0)
    small = GlimpseSpec(glimpse_px=16, num_glimpses=8)
    assert (small.pixel_percent(128, 256, 16), small.area_percent(128, 256)) == (6.25, 6.25)


def test_retinal_glimpse_structure():
    spec = GlimpseSpec(kind="retinal", glimpse_px=48, levels=3)
    img = np.random.default_rng(0).random((3, 64, 64))
    block, levels, n = extract_retinal_glimpse(img, (8, 4), spec, 16)
    assert block.shape == (3, 48, 48) and n == 768
    assert np.array_equal(block[:, 16:32, 16:32], img[:, 24:40, 20:36])
    assert np.all(levels[16:32, 16:32] == 1) and levels[0, 0] == 3 and levels[8, 8] == 2
    # the outer ring is constant on 3x3 cells
    ring = block[:, :3, :3]
    assert np.allclose(ring, ring[:, :1, :1])
    assert np.isclose(ring[0, 0, 0], img[0, 8:11, 4:7].mean())
    # distinct samples: 16x16 per level
    assert len(np.unique(block[0][levels == 3])) <= 256


def test_retinal_constant_image_equals_plain_crop():
    spec = GlimpseSpec(kind="retinal", glimpse_px=24, levels=3)
    img = np.full((1, 32, 32), 0.37)
    block, _, _ = extract_retinal_glimpse(img, (4, 4), spec, 8)
    assert np.allclose(block, img[:, 4:28, 4:28])


def test_retinal_validation():
    with pytest.raises(ConfigError):
        GlimpseSpec(kind="retinal", glimpse_px=32, levels=3).validate(16)
    with pytest.raises(ConfigError):
        GlimpseSpec(glimpse_px=12).validate(8)
    with pytest.raises(ValueError):
        extract_glimpse(np.zeros((1, 16, 16)), (10, 0), GlimpseSpec(glimpse_px=8), 4)


def test_finest_observation_wins():
    spec = GlimpseSpec(kind="retinal", glimpse_px=12, levels=3)
    img = np.random.default_rng(1).random((1, 24, 24))
    st_ = ExplorationState.empty(1, 24, 24, 4)
    apply_glimpse(st_, img, (1, 1), spec, 4)
    apply_glimpse(st_, img, (0, 0), spec, 4)
    # pixels at the centre of the first glimpse stay at full resolution
    assert np.array_equal(st_.observed[:, 8:12, 8:12], img[:, 8:12, 8:12])
    assert np.all(st_.level[8:12, 8:12] == 1)
    assert st_.known_mask[:3, :3].all() and st_.known_mask[1:4, 1:4].all() and st_.known_mask.sum() == 14


def test_composite_paints_unknown_gray():
    st_ = ExplorationState.empty(3, 8, 8, 4)
    img = np.zeros((3, 8, 8))
    apply_glimpse(st_, img, (0, 1), GlimpseSpec(glimpse_px=4), 4)
    comp = composite(st_)
    assert np.all(comp[:, :4, 4:] == 0) and np.all(comp[:, 4:, :] == 0.5)


@pytest.fixture
def model():
    return MaeModel(tiny_config(), seed=3)


def test_explore_single_glimpse(model, images):
    rep = explore(model, images[0], GlimpseSpec(glimpse_px=4, num_glimpses=1), "attention")
    assert len(rep.anchors) == 1
    assert len(rep.per_step_loss) == 2 and len(rep.predictions) == 2
    assert len(rep.entropy_maps) == 1 and rep.known_mask.sum() == 1


def test_first_anchor_is_content_independent(model):
    imgs = np.random.default_rng(3).random((6, 3, 16, 16))
    reps = explore_batch(model, imgs, GlimpseSpec(glimpse_px=8, num_glimpses=2), "attention")
    assert len({r.anchors[0] for r in reps}) == 1


def test_checkerboard_bookkeeping(model, images):
    spec = GlimpseSpec(glimpse_px=8, num_glimpses=4)
    for rep in explore_batch(model, images, spec, "checker", seed=2):
        assert rep.known_mask.sum() == 4 * 4 and not rep.completed_early


def test_early_completion_flagged(model, images):
    rep = explore(model, images[0], GlimpseSpec(glimpse_px=8, num_glimpses=6), "checker")
    assert rep.completed_early and len(rep.anchors) == 4


def test_ame_never_revisits_known_footprints(model, images):
    spec = GlimpseSpec(glimpse_px=4, num_glimpses=10)
    for rep in explore_batch(model, images, spec, "attention"):
        assert len(set(rep.anchors)) == 10
        for t, (r, c) in enumerate(rep.anchors):
            assert (r, c) not in rep.anchors[:t]
            assert rep.entropy_maps[t][r, c] > 0


def test_explore_deterministic_and_batch_independent(model, images):
    spec = GlimpseSpec(glimpse_px=4, num_glimpses=3)
    for sel in ("attention", "random", "checker"):
        batch = explore_batch(model, images, spec, sel, seed=9, indices=[0, 1, 2, 3], record_timing=False)
        solo = explore(model, images[2], spec, sel, seed=9, index=2)
        assert batch[2].anchors == solo.anchors
        assert np.allclose(batch[2].per_step_metric, solo.per_step_metric, atol=1e-6)
        again = explore_batch(model, images, spec, sel, seed=9, indices=[0, 1, 2, 3], record_timing=False)
        assert [r.to_json() for r in again] == [r.to_json() for r in batch]


def test_entropy_maps_zero_at_known_patches(model, images):
    rep = explore(model, images[0], GlimpseSpec(glimpse_px=4, num_glimpses=5), "random", seed=1)
    known = np.zeros((4, 4), bool)
    for t, m in enumerate(rep.entropy_maps):
        assert np.all(m[known] == 0)
        assert np.all(m[~known] > 0)
        r, c = rep.anchors[t]
        known[r, c] = True


def test_episode_metric_is_prediction_rmse(model, images):
    rep = explore(model, images[0], GlimpseSpec(glimpse_px=4, num_glimpses=2), "random")
    pred = rep.final_prediction
    assert pred.shape == images[0].shape
    assert rep.final_metric == pytest.approx(float(np.sqrt(np.mean((pred - images[0]) ** 2))), rel=1e-5)


def test_report_json_fields(model, images):
    rep = explore(model, images[0], GlimpseSpec(glimpse_px=4, num_glimpses=2), "attention")
    d = rep.to_dict()
    assert set(d) >= {"anchors", "per_step_loss", "per_step_metric", "entropy_maps", "timing_ms"}
    assert len(d["entropy_maps"]) == 2 and np.array(d["entropy_maps"][0]).shape == (4, 4)


def test_invariants_over_random_forwards(model):
    # a scaled-down version of the 10^4-forward audit run in the acceptance module
    rng = np.random.default_rng(0)
    S = model.config.num_patches + 1
    for _ in range(20):
        imgs = rng.random((8, 3, 16, 16)).astype(np.float32)
        known = rng.random((8, 16)) < rng.random((8, 1))
        out = model.forward(patchify(imgs, 4), known, capture_all=True)
        for cap in out.all_captures:
            assert np.all(np.abs(cap.probs.sum(-1) - 1) <= 1e-6)
            if cap.key_mask is not None:
                assert np.all(np.where(cap.key_mask[:, None, None, :], 0, cap.probs) == 0)
        for b in range(8):
            v = entropy_map(out.capture, known[b].reshape(4, 4), b).values
            assert np.all(v >= 0) and np.all(v <= model.config.dec_heads * math.log(S))
            assert np.all(v[known[b].reshape(4, 4)] == 0)


def test_entropy_map_accepts_emap_objects():
    e = EntropyMap(np.arange(4.0).reshape(2, 2))
    assert e.grid == (2, 2)
    assert select_ame(e, ONE, np.zeros((2, 2), bool), 1) == (1, 1)
