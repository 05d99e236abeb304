import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbanet import network as N
from fbanet.attention import (
    ActivitySummary,
    Attention,
    AttentionConfig,
    accumulate,
    build_patterns,
    load_patterns,
    modulation_terms,
    parse_patterns,
    patterns_text,
    save_patterns,
    spatial_average,
)

from helpers import random_patterns, toy_network
from oracles import patterns_two_pass, spatial_mean_loops


class _Trace:
    def __init__(self, relu):
        self.relu = relu


def test_spatial_average_cases():
    assert spatial_average(_Trace({1: np.array([[[1.0, 2.0], [3.0, 4.0]]])}), 1).tolist() == [2.5]
    assert spatial_average(_Trace({1: np.full((1, 3, 5), 0.7)}), 1) == pytest.approx([0.7])
    fc = np.array([0.0, 3.0, 1.5])
    assert spatial_average(_Trace({2: fc}), 2).tolist() == fc.tolist()


def test_spatial_average_matches_loops_and_batches():
    x = np.random.default_rng(0).uniform(size=(3, 4, 4)).astype(np.float32)
    np.testing.assert_allclose(spatial_average(_Trace({1: x}), 1), spatial_mean_loops(x), rtol=0, atol=1e-15)
    batch = np.stack([x, 2 * x])
    out = spatial_average(_Trace({1: batch}), 1)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out[1], 2 * spatial_mean_loops(x), atol=1e-15)


def _summary(rows_by_cat, layer=1):
    return accumulate([(c, {layer: np.asarray(r, float)}) for c, r in rows_by_cat], [c for c, _ in rows_by_cat], [layer])


def test_accumulate_single_image():
    s = _summary([("a", [[3.0, -1.0]])])
    assert s.mean(1).tolist() == [3.0, -1.0]
    assert s.std(1).tolist() == [0.0, 0.0]


def test_accumulate_two_images():
    s = accumulate([("a", {1: np.array([[0.0]])}), ("b", {1: np.array([[2.0]])})], ["a", "b"], [1])
    assert s.mean(1).tolist() == [1.0]
    assert s.std(1).tolist() == [1.0]


def test_accumulate_matches_two_pass():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(10, 4))
    s = accumulate([("a", {1: rows[:3]}), ("b", {1: rows[3:]})], ["a", "b"], [1])
    np.testing.assert_allclose(s.mean(1), rows.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(s.std(1), rows.std(axis=0), atol=1e-6)


def test_accumulate_rejects_empty():
    with pytest.raises(ValueError, match="N == 0"):
        accumulate([], ["a"], [1])


def test_merge_order_does_not_matter():
    rng = np.random.default_rng(2)
    parts = [("a", rng.normal(size=(5, 3)) * 10 + 4), ("b", rng.normal(size=(7, 3))), ("a", rng.normal(size=(2, 3)))]
    summaries = []
    for c, rows in parts:
        s = ActivitySummary(["a", "b"], [1])
        s.add(c, {1: rows})
        summaries.append(s)
    fwd = summaries[0].merge(summaries[1]).merge(summaries[2])
    rev = summaries[2].merge(summaries[1].merge(summaries[0]))
    for fn in ("mean", "std"):
        np.testing.assert_allclose(getattr(fwd, fn)(1), getattr(rev, fn)(1), rtol=1e-5)
    np.testing.assert_allclose(build_patterns(fwd).get(1, "a"), build_patterns(rev).get(1, "a"), rtol=1e-5, atol=1e-6)


def test_patterns_hand_values():
    s = _summary([("A", [[2.0]]), ("B", [[0.0]])])
    bi = build_patterns(s)
    assert bi.get(1, "A").tolist() == [1.0]
    assert bi.get(1, "B").tolist() == [-1.0]
    pos = build_patterns(s, "positive")
    assert pos.get(1, "A").tolist() == [1.0]
    assert pos.get(1, "B").tolist() == [0.0]


def test_category_at_grand_mean_gives_zero_pattern():
    s = _summary([("A", [[1.0], [3.0]]), ("B", [[2.0], [2.0]]), ("C", [[0.0], [4.0]])])
    assert build_patterns(s).get(1, "B").tolist() == [0.0]


def test_dead_map_gives_zero_not_nan():
    s = _summary([("A", [[0.0, 1.0]]), ("B", [[0.0, 3.0]])])
    f = build_patterns(s).get(1, "A")
    assert f.tolist() == [0.0, -1.0]


def test_unknown_category_rejected():
    s = ActivitySummary(["a"], [1])
    with pytest.raises(ValueError, match="unknown category"):
        s.add("zzz", {1: np.zeros((1, 2))})


def test_patterns_match_two_pass_oracle_on_network_traces():
    net = toy_network()
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(12, 2, 8, 8)).astype(np.float32)
    cats = np.array(["a", "b", "c"] * 4)
    tr = N.forward(net, x)
    layers = [1, 2, 3]
    summary = accumulate([(c, {l: spatial_average(tr, l)[cats == c] for l in layers}) for c in "abc"], list("abc"), layers)
    pats = build_patterns(summary)
    for l in layers:
        rows = [spatial_mean_loops(tr.relu[l][i]) if tr.relu[l].ndim == 4 else tr.relu[l][i] for i in range(12)]
        expected = patterns_two_pass(rows, cats, "abc")
        for c in "abc":
            np.testing.assert_allclose(pats.get(l, c), expected[c], rtol=1e-5, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 2**31 - 1))
def test_balanced_patterns_sum_to_zero(per_cat, n_cat, seed):
    rng = np.random.default_rng(seed)
    cats = [f"c{i}" for i in range(n_cat)]
    batches = [(c, {1: rng.normal(size=(per_cat, 5)) * rng.uniform(0.1, 10)}) for c in cats]
    pats = build_patterns(accumulate(batches, cats, [1]))
    total = sum(pats.get(1, c).astype(np.float64) for c in cats)
    np.testing.assert_allclose(total, 0.0, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_rectified_is_clamped_bidirectional_and_scale_free(seed, scale):
    rng = np.random.default_rng(seed)
    batches = [(c, {1: rng.normal(size=(4, 6))}) for c in "ab"]
    bi = build_patterns(accumulate(batches, "ab", [1]))
    pos = build_patterns(accumulate(batches, "ab", [1]), "positive")
    scaled = build_patterns(accumulate([(c, {1: r[1] * scale}) for c, r in batches], "ab", [1]))
    for c in "ab":
        assert np.all(pos.get(1, c) >= 0)
        np.testing.assert_array_equal(pos.get(1, c), np.maximum(bi.get(1, c), 0))
        np.testing.assert_allclose(scaled.get(1, c), bi.get(1, c), atol=1e-5)


def test_pattern_file_round_trip(tmp_path):
    pats = random_patterns(toy_network(), categories=("cat", "dog", "bus"))
    pats.network_hash = "ab" * 32
    path = tmp_path / "p.txt"
    save_patterns(pats, path)
    back = load_patterns(path)
    assert back.categories == pats.categories and back.counts == pats.counts
    assert back.network_hash == pats.network_hash
    for key, v in pats.patterns.items():
        assert back.patterns[key].tobytes() == v.tobytes()
    assert patterns_text(back) == path.read_text()


def test_pattern_file_rejects_garbage():
    with pytest.raises(ValueError, match="header"):
        parse_patterns("hello\n")
    text = patterns_text(random_patterns(toy_network()))
    broken = "\n".join(l for l in text.splitlines() if not l.startswith("pattern 2 a"))
    with pytest.raises(ValueError, match="lacks"):
        parse_patterns(broken)


def test_modulation_terms():
    pats = random_patterns(toy_network())
    pats.patterns[(1, "a")] = np.array([0.5, -1.0, 0.0, 2.0], np.float32)
    cfg = lambda mode, b, layers={1}: AttentionConfig(mode, "bidirectional", layers, b)
    assert modulation_terms(cfg("additive", 0.0), pats, 1, "a").tolist() == [0, 0, 0, 0]
    assert modulation_terms(cfg("multiplicative", 0.0), pats, 1, "a").tolist() == [1, 1, 1, 1]
    assert modulation_terms(cfg("multiplicative", 1.2), pats, 1, "a")[0] == pytest.approx(1.6)
    assert modulation_terms(cfg("multiplicative", 1.2, {1, 2}), pats, 1, "a")[0] == pytest.approx(1.3)
    assert modulation_terms(cfg("additive", 8.0, {1, 2}), pats, 1, "a")[3] == pytest.approx(8.0)
    pos = AttentionConfig("multiplicative", "positive", {1}, 1.0)
    assert modulation_terms(pos, pats, 1, "a").tolist() == [1.5, 1.0, 1.0, 3.0]
    # literal slope goes negative for strongly negative patterns unless clamped
    assert modulation_terms(cfg("multiplicative", 2.0), pats, 1, "a")[1] == pytest.approx(-1.0)
    clamped = AttentionConfig("multiplicative", "bidirectional", {1}, 2.0, clamp_slope=True)
    assert modulation_terms(clamped, pats, 1, "a")[1] == 0.0


@given(st.floats(0, 10), st.floats(0, 10), st.floats(1e-3, 5))
def test_multiplicative_term_increases_with_beta(b1, b2, f):
    pats = random_patterns(toy_network())
    pats.patterns[(1, "a")] = np.array([f] * 4, np.float32)
    lo, hi = sorted((b1, b2))
    if hi - lo < 1e-9:
        return
    t = lambda b: modulation_terms(AttentionConfig("multiplicative", "bidirectional", {1}, b), pats, 1, "a")[0]
    assert t(hi) > t(lo)


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig("subtractive", "bidirectional", {1}, 1.0)
    with pytest.raises(ValueError):
        AttentionConfig("additive", "bidirectional", set(), 1.0)
    with pytest.raises(ValueError):
        AttentionConfig("additive", "bidirectional", {1}, -0.1)
    with pytest.raises(ValueError, match="unknown category"):
        Attention(AttentionConfig("additive", "bidirectional", {1}, 1.0), random_patterns(toy_network()), "zebra")


def _spatial_check_inputs():
    net = toy_network()
    pats = random_patterns(net)
    x = np.random.default_rng(6).uniform(size=(4, 2, 8, 8)).astype(np.float32)
    return net, pats, x


@pytest.mark.parametrize("layer", [1, 2, 3])
def test_multiplicative_is_spatially_global(layer):
    net, pats, x = _spatial_check_inputs()
    beta = 0.6
    plain = N.forward(net, x)
    att = N.forward(net, x, Attention(AttentionConfig("multiplicative", "bidirectional", {layer}, beta), pats, "a"))
    slope = 1 + beta * pats.get(layer, "a").astype(np.float64)
    shape = (-1,) + (1,) * (plain.relu[layer].ndim - 2)
    ratio_expected = np.broadcast_to(slope.reshape(shape), plain.relu[layer].shape[1:])
    live = (plain.relu[layer] > 0) & (ratio_expected > 0)
    ratio = att.relu[layer].astype(np.float64)[live] / plain.relu[layer].astype(np.float64)[live]
    np.testing.assert_allclose(ratio, np.broadcast_to(ratio_expected, plain.relu[layer].shape)[live], rtol=1e-5)


@pytest.mark.parametrize("layers", [{1}, {2}, {3}, {2, 3}])
def test_additive_shift_is_spatially_global(layers):
    net, pats, x = _spatial_check_inputs()
    beta = 3.0
    cfg = AttentionConfig("additive", "bidirectional", layers, beta)
    plain = N.forward(net, x)
    att = N.forward(net, x, Attention(cfg, pats, "b"))
    first = min(layers)
    term = cfg.effective_beta * pats.get(first, "b").astype(np.float64)
    term = term.reshape((-1,) + (1,) * (plain.pre_relu[first].ndim - 2))
    # exact in the stored precision: the shifted input is the float32 rounding of input + term
    expected = (plain.pre_relu[first].astype(np.float64) + term).astype(np.float32)
    np.testing.assert_array_equal(att.pre_relu[first], expected)
    diff = att.pre_relu[first].astype(np.float64) - plain.pre_relu[first].astype(np.float64)
    np.testing.assert_allclose(diff, np.broadcast_to(term, diff.shape), atol=1e-5)
