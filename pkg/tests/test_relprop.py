import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcne import relprop as rp
from dcne.tensornet import AvgPool2d, Conv2d, Dense, Flatten, MaxPool2d, ReLU, forward, from_layers
from oracles import (avgpool_back_loops, maxpool_back_loops, random_net, zplus_conv_loops,
                     zplus_dense_loops)


def hand_net():
    # 4 inputs -> 3 hidden -> 2 outputs; one negative weight into hidden unit 2
    w1 = np.array([[1.0, 0, 1, 0], [0, 1, 0, 1], [1, 1, 0, -1]])
    w2 = np.array([[1.0, 1, 1], [0, 0, 1]])
    net = from_layers((1, 1, 4), [Flatten(), Dense(w1, np.zeros(3)), ReLU(),
                                  Dense(w2, np.zeros(2))])
    return net, np.array([[[1.0, 2.0, 0.0, 1.0]]])


def test_hand_computed_zplus_decomposition():
    # hidden = [1, 3, 2], logits = [6, 2]; relevance 6 on class 0 splits
    # [1, 3, 2] over hidden units, then
    #   unit 0: x0*1 = 1            -> [1, 0, 0, 0]
    #   unit 1: x1*1 + x3*1 = 2 + 1 -> [0, 2, 0, 1]
    #   unit 2: positive parts 1, 2 -> 2 * [1/3, 2/3, 0, 0]
    net, x = hand_net()
    trace = forward(net, x)
    np.testing.assert_allclose(trace.logits, [6.0, 2.0])
    got = rp.unconditional_attribution(net, trace, 0)
    np.testing.assert_allclose(got, [[5 / 3, 10 / 3, 0.0, 1.0]], rtol=1e-8)
    conds, maps = rp.all_attributions(net, trace, 0, [rp.Condition(1, c) for c in range(3)])
    np.testing.assert_allclose(maps[0], [[1, 0, 0, 0]], rtol=1e-8)
    np.testing.assert_allclose(maps[1], [[0, 2, 0, 1]], rtol=1e-8)
    np.testing.assert_allclose(maps[2], [[2 / 3, 4 / 3, 0, 0]], rtol=1e-8)


def test_initial_relevance_is_the_target_logit():
    net, x = hand_net()
    trace = forward(net, x)
    np.testing.assert_array_equal(rp.initial_relevance(trace, 1), [0.0, 2.0])
    with pytest.raises(ValueError):
        rp.initial_relevance(trace, 2)


@given(seed=st.integers(0, 10_000), padding=st.integers(0, 1), stride=st.integers(1, 2))
def test_conv_rule_matches_loops(seed, padding, stride):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5))
    layer = Conv2d(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride, padding)
    R = rng.normal(size=layer.out_shape(x.shape))
    got = rp.backward_layer(layer, x, R[None])[0]
    want = zplus_conv_loops(x, layer.weight, layer.bias, stride, padding, R)
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


@given(seed=st.integers(0, 10_000))
def test_dense_rule_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=7)
    layer = Dense(rng.normal(size=(4, 7)), rng.normal(size=4))
    R = rng.normal(size=4)
    got = rp.backward_layer(layer, x, R[None])[0]
    np.testing.assert_allclose(got, zplus_dense_loops(x, layer.weight, layer.bias, R),
                               rtol=1e-9, atol=1e-9)


@given(seed=st.integers(0, 10_000), size=st.integers(1, 3), stride=st.integers(1, 3),
       ties=st.booleans())
def test_pool_rules_match_loops(seed, size, stride, ties):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 3, size=(2, 7, 7)).astype(float) if ties else rng.normal(size=(2, 7, 7))
    mp, ap = MaxPool2d(size, stride), AvgPool2d(size, stride)
    R = rng.normal(size=mp.out_shape(x.shape))
    np.testing.assert_allclose(rp.backward_layer(mp, x, R[None])[0],
                               maxpool_back_loops(x, size, stride, R), atol=1e-12)
    np.testing.assert_allclose(rp.backward_layer(ap, x, R[None])[0],
                               avgpool_back_loops(x, size, stride, R), rtol=1e-9, atol=1e-9)


def _positive_target(net, rng):
    for _ in range(20):
        trace = forward(net, rng.random(net.input_shape))
        t = trace.predicted_class
        if trace.logits[t] > 1e-3:
            return trace, t
    return None, None


@given(seed=st.integers(0, 100_000))
def test_conservation_on_zero_bias_nets(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    trace, t = _positive_target(net, rng)
    if trace is None:
        return
    for R in rp.relevance_profile(net, trace, t):
        assert R.sum() == pytest.approx(trace.logits[t], rel=1e-6)


@given(seed=st.integers(0, 100_000))
def test_conditionals_sum_to_unconditional(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, zero_bias=bool(rng.random() < 0.5))
    trace = forward(net, rng.random(net.input_shape))
    t = int(rng.integers(net.num_classes))
    full = rp.unconditional_attribution(net, trace, t)
    scale = max(np.abs(full).max(), 1e-12)
    for k in net.parametric_layers():
        maps = rp.layer_attributions(net, trace, t, k)
        np.testing.assert_allclose(maps.sum(axis=0), full, rtol=1e-6, atol=1e-6 * scale)


@given(seed=st.integers(0, 100_000))
def test_non_negative_inputs_give_non_negative_maps(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng)
    trace, t = _positive_target(net, rng)
    if trace is None:
        return
    _, maps = rp.all_attributions(net, trace, t)
    assert (maps >= 0).all()


def test_chunking_does_not_change_results():
    rng = np.random.default_rng(5)
    net = random_net(rng, max_channels=16)
    trace = forward(net, rng.random(net.input_shape))
    k = net.parametric_layers()[0]
    a = rp.layer_attributions(net, trace, 0, k, chunk=1)
    b = rp.layer_attributions(net, trace, 0, k, chunk=32)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_single_condition_matches_batch():
    net, x = hand_net()
    trace = forward(net, x)
    one = rp.conditional_attribution(trace, net, 0, rp.Condition(1, 2))
    _, maps = rp.all_attributions(net, trace, 0)
    conds = [rp.Condition(k, i) for k, i in net.conditions()]
    np.testing.assert_allclose(one.values, maps[conds.index(rp.Condition(1, 2))])


def test_condition_validation():
    net, x = hand_net()
    trace = forward(net, x)
    with pytest.raises(ValueError, match="conv2d or dense"):
        rp.conditional_attribution(trace, net, 0, rp.Condition(2, 0))
    with pytest.raises(ValueError, match="channel out of range"):
        rp.conditional_attribution(trace, net, 0, rp.Condition(1, 3))


def test_rank_conditions_breaks_ties_by_layer_then_channel():
    C = rp.Condition
    scores = {C(3, 1): 1.0, C(0, 5): 2.0, C(0, 2): 1.0, C(1, 0): 1.0, C(0, 0): 0.5}
    assert rp.rank_conditions(scores, 4) == [C(0, 5), C(0, 2), C(1, 0), C(3, 1)]
    with pytest.raises(ValueError, match="exceeds"):
        rp.rank_conditions(scores, 6)


@given(scores=st.lists(st.integers(-3, 3), min_size=1, max_size=30), data=st.data())
def test_rank_conditions_is_a_sorted_prefix(scores, data):
    table = {rp.Condition(i % 4, i): float(s) for i, s in enumerate(scores)}
    n = data.draw(st.integers(1, len(table)))
    top = rp.rank_conditions(table, n)
    assert len(top) == n == len(set(top))
    keys = [(-table[c], c.layer_index, c.channel_index) for c in top]
    assert keys == sorted(keys)
    rest = set(table) - set(top)
    assert all(table[c] <= table[top[-1]] for c in rest)


def test_selection_modes():
    rng = np.random.default_rng(3)
    net = random_net(rng)
    traces = [forward(net, rng.random(net.input_shape)) for _ in range(3)]
    table = rp.class_relevance_table(traces, net, 0)
    manual = {}
    for tr in traces:
        conds, maps = rp.all_attributions(net, tr, 0)
        for c, m in zip(conds, maps):
            manual[c] = manual.get(c, 0.0) + m.sum() / 3
    assert table.keys() == manual.keys()
    for c in table:
        assert table[c] == pytest.approx(manual[c], rel=1e-12, abs=1e-12)

    n = min(4, len(table))
    ex = rp.explanation_set(traces[1], net, 0, rp.SelectionConfig(rp.CLASS_MEAN, n), table, "b")
    assert ex.conditions == rp.rank_conditions(table, n)
    assert ex.image_id == "b" and ex.stack().shape == (n,) + net.input_shape[1:]

    own = rp.explanation_set(traces[1], net, 0, rp.SelectionConfig(rp.PER_IMAGE_SUM, n))
    conds, maps = rp.all_attributions(net, traces[1], 0)
    assert own.conditions == rp.rank_conditions(dict(zip(conds, maps.sum(axis=(1, 2)))), n)

    with pytest.raises(ValueError, match="relevance table"):
        rp.explanation_set(traces[1], net, 0, rp.SelectionConfig(rp.CLASS_MEAN, n))
    with pytest.raises(ValueError):
        rp.SelectionConfig("largest", 3)
    with pytest.raises(ValueError):
        rp.SelectionConfig(rp.CLASS_MEAN, 0)


def test_positive_bias_absorbs_relevance():
    net = from_layers((1, 1, 2), [Flatten(), Dense(np.array([[1.0, 1.0]]), np.array([2.0]))])
    trace = forward(net, np.array([[[1.0, 1.0]]]))
    # logit 4, of which the bias accounts for half
    assert rp.unconditional_attribution(net, trace, 0).sum() == pytest.approx(2.0)


def test_dead_channel_gives_an_all_zero_map():
    # hidden unit 1 is switched off by the relu
    w1 = np.array([[1.0, 1.0], [-1.0, -1.0], [0.5, 2.0]])
    net = from_layers((1, 1, 2), [Flatten(), Dense(w1, np.zeros(3)), ReLU(),
                                  Dense(np.ones((1, 3)), np.zeros(1))])
    trace = forward(net, np.array([[[1.0, 2.0]]]))
    assert trace.per_layer[3][1] == 0.0
    m = rp.conditional_attribution(trace, net, 0, rp.Condition(1, 1))
    assert not m.values.any()
    assert rp.conditional_attribution(trace, net, 0, rp.Condition(1, 0)).values.any()
