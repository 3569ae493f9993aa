import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcne import evalbench as eb
from oracles import (grid_search_threshold, iou_loops, q_at_threshold_loops, q_class_loops,
                     q_instance_loops, uint8_loops)


def test_normalize_examples():
    assert eb.normalize_to_uint8(np.array([[0.0, 1.0, 2.0]])).tolist() == [[0, 128, 255]]
    assert not eb.normalize_to_uint8(np.full((3, 3), 7.5)).any()


@given(seed=st.integers(0, 10_000))
def test_normalize_matches_loops_and_threshold_zero_is_support(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(5, 6)) * rng.choice([1e-3, 1.0, 1e3])
    u = eb.normalize_to_uint8(v)
    np.testing.assert_array_equal(u, uint8_loops(v))
    above_min = v > v.min()
    # tiny positive gaps can round to 0, so thresholding at 0 is a subset of the support
    assert not (eb.binarize(v, 0) & ~above_min).any()
    gap = (v - v.min()) / (v.max() - v.min()) * 255
    np.testing.assert_array_equal(eb.binarize(v, 0), gap >= 0.5)


def test_iou_edge_cases():
    a = np.array([[1, 0], [1, 0]], bool)
    b = np.array([[1, 1], [0, 0]], bool)
    assert eb.iou(a, b) == pytest.approx(1 / 3)
    assert eb.iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0
    assert eb.iou(a, a) == 1.0
    with pytest.raises(ValueError):
        eb.iou(np.zeros((2, 2)), np.zeros((3, 2)))


@given(seed=st.integers(0, 10_000))
def test_iou_matches_loops_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 7)) < 0.4, rng.random((6, 7)) < 0.3
    assert eb.iou(a, b) == iou_loops(a, b) == eb.iou(b, a)
    assert 0.0 <= eb.iou(a, b) <= 1.0


def random_case(rng, shape=None):
    h, w = shape or (int(rng.integers(2, 7)), int(rng.integers(2, 7)))
    n = int(rng.integers(1, 5))
    maps = rng.random((n, h, w)) ** 3
    if rng.random() < 0.2:
        maps[0] = 0.25  # constant map
    mask = np.where(rng.random((h, w)) < 0.35, 255, 0).astype(np.uint8)
    return maps, mask


@pytest.mark.parametrize("block", range(10))
def test_q_functions_match_loop_oracles(block):
    # 10 blocks of 100 randomized fixtures
    rng = np.random.default_rng(block)
    cfg = eb.EvalConfig()
    for _ in range(100):
        maps, mask = random_case(rng)
        t = int(rng.choice(cfg.thresholds))
        assert eb.q_f_at_threshold(maps, mask, t) == pytest.approx(q_at_threshold_loops(maps, mask, t), abs=1e-15)
        assert eb.q_f_instance(maps, mask, cfg) == pytest.approx(
            q_instance_loops(maps, mask, cfg.thresholds), abs=1e-15)


@given(seed=st.integers(0, 10_000))
def test_q_f_class_matches_loops(seed):
    rng = np.random.default_rng(seed)
    records, maps_list, mask_list = [], [], []
    for i in range(int(rng.integers(1, 6))):
        maps, mask = random_case(np.random.default_rng(seed * 31 + i), (2, 2))
        has = i == 0 or rng.random() < 0.7
        records.append(eb.ImageRecord.build(f"i{i}", maps, {0: mask} if has else {}))
        maps_list.append(maps)
        mask_list.append(mask if has else None)
    t = int(rng.choice(eb.DEFAULT_THRESHOLDS))
    assert eb.q_f_class(records, 0, t) == pytest.approx(q_class_loops(maps_list, mask_list, t), abs=1e-12)
    with pytest.raises(ValueError):
        eb.q_f_class(records, 1, t)


@given(seed=st.integers(0, 10_000))
def test_selected_threshold_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    ids = [f"i{k}" for k in range(int(rng.integers(2, 9)))]
    recs, raw = {}, {}
    for k, i in enumerate(ids):
        maps, mask = random_case(np.random.default_rng(seed * 17 + k), (3, 3))
        masks = {0: mask, 1: np.where(rng.random((3, 3)) < 0.5, 255, 0).astype(np.uint8)}
        recs[i] = eb.ImageRecord.build(i, maps, masks)
        raw[i] = (maps, masks)
    cfg = eb.EvalConfig(seed=seed)
    held, scored = eb.holdout_split(ids, cfg)
    want = grid_search_threshold([raw[i][0] for i in held], [raw[i][1] for i in held], cfg.thresholds)
    assert eb.select_threshold([recs[i] for i in held], cfg) == want


def test_threshold_ties_go_to_the_smaller_value():
    maps = np.array([[[0.0, 1.0], [0.0, 0.0]]])
    mask = np.array([[0, 255], [0, 0]], np.uint8)
    rec = eb.ImageRecord.build("a", maps, {0: mask})
    # every threshold below 255 gives IoU 1
    assert eb.select_threshold([rec], eb.EvalConfig()) == 0


@given(n=st.integers(1, 50), frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_holdout_split_properties(n, frac, seed):
    ids = [f"x{k}" for k in range(n)]
    cfg = eb.EvalConfig(holdout_fraction=frac, seed=seed)
    held, scored = eb.holdout_split(ids, cfg)
    assert eb.holdout_split(ids, cfg) == (held, scored)
    assert held and scored
    if n >= 2:
        assert not set(held) & set(scored)
        assert sorted(held + scored) == sorted(ids)
    # manifest order is kept on both sides
    assert held == [i for i in ids if i in held]


def test_eval_config_validation():
    with pytest.raises(ValueError):
        eb.EvalConfig(thresholds=())
    with pytest.raises(ValueError):
        eb.EvalConfig(thresholds=(50, 25))
    with pytest.raises(ValueError):
        eb.EvalConfig(holdout_fraction=1.0)
    with pytest.raises(ValueError):
        eb.FeatureMask("a", 0, np.array([[0, 128]]))
    assert eb.FeatureMask("a", 0, np.array([[0, 255]])).binary.tolist() == [[False, True]]


def test_complexity_counts_maps():
    assert eb.complexity([np.zeros((10, 2, 2)), np.zeros((10, 2, 2))]) == 20
    assert eb.complexity({"a": [1, 2, 3], "b": [4]}) == 4


def test_evaluate_class_and_aggregate_match_recomputation():
    recs = []
    for k in range(10):
        maps, mask = random_case(np.random.default_rng(100 + k), (2, 2))
        masks = {0: mask} if k % 3 else {0: mask, 1: mask[::-1]}
        recs.append(eb.ImageRecord.build(f"i{k}", maps, masks))
    cfg = eb.EvalConfig(seed=4)
    r = eb.evaluate_class("c", recs, cfg)
    held, scored = eb.holdout_split([x.image_id for x in recs], cfg)
    assert r.holdout == held and r.scored == scored
    assert r.threshold == eb.select_threshold([x for x in recs if x.image_id in held], cfg)
    for f, q in r.features.items():
        rows = [r.per_image[i][f] for i in scored if f in r.per_image[i]]
        assert q == pytest.approx(np.mean(rows)) if rows else q is None
    assert r.complexity_total == sum(x.normalized.shape[0] for x in recs)
    assert r.complexity_per_image == r.complexity_total / 10
    for i in scored:
        for f, v in r.per_image[i].items():
            assert r.per_image_best[i][f] >= v

    r2 = eb.evaluate_class("d", recs[:5], eb.EvalConfig(seed=1))
    agg = eb.aggregate([r, r2])
    assert agg["mean_iou_class_weighted"] == pytest.approx((r.mean() + r2.mean()) / 2)
    pairs = [v for res in (r, r2) for row in res.per_image.values() for v in row.values()]
    assert agg["mean_iou_image_weighted"] == pytest.approx(sum(pairs) / len(pairs))


def test_perfect_maps_score_one():
    mask = np.zeros((4, 4), np.uint8)
    mask[1:3, 1:3] = 255
    recs = [eb.ImageRecord.build(f"i{k}", mask.astype(float)[None], {0: mask}) for k in range(5)]
    r = eb.evaluate_class("c", recs, eb.EvalConfig())
    assert r.features == {0: 1.0}


def test_threshold_selection_needs_annotated_holdout():
    rec = eb.ImageRecord.build("a", np.ones((1, 2, 2)), {})
    with pytest.raises(ValueError, match="no visible feature masks"):
        eb.select_threshold([rec], eb.EvalConfig())
    with pytest.raises(ValueError):
        eb.select_threshold([], eb.EvalConfig())


@given(seed=st.integers(0, 10_000))
def test_quality_monotone_in_maps_and_thresholds(seed):
    rng = np.random.default_rng(seed)
    maps = rng.random((4, 3, 3))
    mask = np.where(rng.random((3, 3)) < 0.5, 255, 0).astype(np.uint8)
    cfg = eb.EvalConfig()
    inst = eb.q_f_instance(maps, mask, cfg)
    for t in cfg.thresholds:
        q = eb.q_f_at_threshold(maps, mask, t)
        assert 0.0 <= q <= inst <= 1.0
        # adding a map never lowers the best IoU
        assert eb.q_f_at_threshold(maps[:3], mask, t) <= q


@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_positive_scaling_leaves_selection_unchanged(seed, scale):
    rng = np.random.default_rng(seed)
    recs, scaled = [], []
    for k in range(6):
        maps, mask = random_case(np.random.default_rng(seed * 7 + k), (3, 3))
        recs.append(eb.ImageRecord.build(f"i{k}", maps, {0: mask}))
        scaled.append(eb.ImageRecord.build(f"i{k}", maps * scale, {0: mask}))
    for a, b in zip(recs, scaled):
        np.testing.assert_array_equal(a.normalized, b.normalized)
    cfg = eb.EvalConfig(seed=seed)
    assert eb.evaluate_class("c", recs, cfg).threshold == eb.evaluate_class("c", scaled, cfg).threshold
