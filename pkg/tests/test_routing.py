from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab.errors import InputError
from moelab.model import ExpertId, ModelConfig, init_model
from moelab.routing import (
    RoutingProfile,
    collect_profile,
    default_boundaries,
    global_topk,
    group_means,
    jaccard,
    layer_groups,
    layerwise_similarity,
    load_profile,
    overlap_matrix,
    region_average,
    save_profile,
)
from moelab.reports import read_curves_csv

from conftest import hand_model

FIXTURES = Path(__file__).parent / "fixtures"


def profile(counts, total=10, language="x"):
    return RoutingProfile(language, total, np.array(counts))


# --- profiles -----------------------------------------------------------------------


def test_saturated_routing_gives_unit_frequencies():
    model = init_model(ModelConfig(vocab_size=10, d_model=4, n_layers=3, n_experts=3, top_k=3, seed=2))
    p = collect_profile(model, [(1, 2, 3), (9, 9)])
    assert np.all(p.freqs == 1.0)


def test_single_token_activates_one_expert_per_layer():
    p = collect_profile(hand_model(), [(2,)])
    assert p.token_total == 1
    for row in p.freqs:
        assert sorted(row.tolist()) == [0.0, 1.0]


def test_counts_match_a_manual_tally():
    # layer 0: tokens 0 and 2 go to expert 0, token 1 to expert 1;
    # layers 1 and 2 have zero routers, so the tie sends everything to expert 0
    corpus = [(0, 1, 0), (2,), (1, 1)]
    p = collect_profile(hand_model(), corpus, "hand")
    assert p.token_total == 6
    assert p.counts.tolist() == [[3, 3], [6, 0], [6, 0]]


def test_frequency_rows_sum_to_top_k(tiny_model):
    p = collect_profile(tiny_model, [(0, 1, 2, 3, 4, 5), (11, 10, 9)])
    np.testing.assert_allclose(p.freqs.sum(axis=1), tiny_model.config.top_k, rtol=1e-15)
    assert p.top_k == 2


def test_profile_validation():
    with pytest.raises(InputError):
        profile([[11, 0]], total=10)
    with pytest.raises(InputError):
        profile([1, 2])
    with pytest.raises(InputError):
        collect_profile(hand_model(), [()])


def test_profiles_add_exactly(tiny_model):
    a = collect_profile(tiny_model, [(0, 1, 2)], "l")
    b = collect_profile(tiny_model, [(3, 4), (5,)], "l")
    assert a + b == collect_profile(tiny_model, [(0, 1, 2), (3, 4), (5,)], "l")


def test_profile_file_round_trip(tmp_path, tiny_model):
    p = collect_profile(tiny_model, [(0, 7, 7, 3)], "lr9")
    save_profile(p, tmp_path / "p.json")
    assert load_profile(tmp_path / "p.json") == p
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(InputError):
        load_profile(tmp_path / "bad.json")


# --- global top-K -------------------------------------------------------------------


def test_full_budget_returns_every_expert():
    p = profile(np.arange(12).reshape(3, 4) % 10)
    assert global_topk(p, 12) == {ExpertId(l, i) for l in range(3) for i in range(4)}


def test_unique_counts_give_the_sorted_prefix():
    rng = np.random.default_rng(4)
    counts = rng.permutation(24).reshape(4, 6)
    p = profile(counts, total=30)
    ranked = sorted(((int(counts[l, i]), l, i) for l in range(4) for i in range(6)), reverse=True)
    for k in (1, 5, 24):
        assert global_topk(p, k) == {ExpertId(l, i) for _, l, i in ranked[:k]}


def test_ties_at_the_cut_keep_the_lower_id():
    p = profile([[5, 3, 3], [3, 1, 0]])
    assert global_topk(p, 2) == {ExpertId(0, 0), ExpertId(0, 1)}
    assert global_topk(p, 3) == {ExpertId(0, 0), ExpertId(0, 1), ExpertId(0, 2)}


def test_top_k_range_is_checked():
    with pytest.raises(InputError):
        global_topk(profile([[1, 2]]), 3)


# --- Jaccard ------------------------------------------------------------------------


def test_jaccard_examples():
    assert jaccard({(0, 1)}, {(0, 1)}) == 1.0
    assert jaccard({(0, 1)}, {(1, 1)}) == 0.0
    assert jaccard({(0, 1), (0, 2), (1, 0)}, {(0, 2), (1, 0), (1, 1)}) == 0.5
    assert jaccard(set(), set()) == 1.0


@given(st.sets(st.integers(0, 20)), st.sets(st.integers(0, 20)))
def test_jaccard_is_a_symmetric_fraction(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0
    assert j == jaccard(b, a)
    assert (j == 1.0) == (a == b)


# --- layer-wise similarity and regions ----------------------------------------------


def test_self_similarity_is_one_everywhere(tiny_model):
    p = collect_profile(tiny_model, [(0, 1, 2, 3)], "a")
    assert layerwise_similarity(p, p).values == (1.0, 1.0, 1.0)


def test_saturated_per_layer_top_k_gives_ones():
    a = profile([[1, 0, 9], [0, 0, 5], [2, 2, 2]], language="a")
    b = profile([[9, 9, 0], [1, 2, 3], [0, 0, 1]], language="b")
    assert layerwise_similarity(a, b, per_layer_topk=3).values == (1.0, 1.0, 1.0)
    assert layerwise_similarity(a, b, per_layer_topk=1).values == (0.0, 1.0, 0.0)


def test_constant_curve_has_constant_regions():
    assert region_average([0.3] * 8, (2, 4)) == pytest.approx((0.3, 0.3, 0.3), rel=1e-15)


def test_alternating_curve_regions_by_hand():
    curve = [0, 1, 0, 1, 0, 1, 0, 1]
    # [0..2] -> 0,1,0; (2..5] -> 1,0,1; (5..7] -> 0,1
    assert region_average(curve, (2, 5)) == pytest.approx((1 / 3, 2 / 3, 1 / 2), rel=1e-15)


def test_published_bengali_row_is_recovered_from_the_fixture():
    curve = read_curves_csv(FIXTURES / "bn_mgsm_curve.csv")["BN~EN"]
    assert len(curve) == 48
    shallow, middle, deep = region_average(curve, default_boundaries(48))
    assert (shallow, middle, deep) == pytest.approx((0.12, 0.22, 0.05), abs=1e-12)


def test_layer_groups_and_default_boundaries():
    assert default_boundaries(48) == (17, 29)
    assert default_boundaries(8) == (2, 4)
    assert [len(g) for g in layer_groups(48, (17, 29))] == [18, 12, 18]
    assert [len(g) for g in layer_groups(8, (2, 4))] == [3, 2, 3]
    with pytest.raises(InputError):
        layer_groups(8, (4, 4))
    with pytest.raises(InputError):
        region_average([0.1] * 8, (2, 7))


# --- overlap matrix -----------------------------------------------------------------


def test_duplicate_profiles_give_an_all_ones_matrix(tiny_model):
    p = collect_profile(tiny_model, [(0, 1, 2, 3)], "a")
    assert np.all(overlap_matrix([p, p, p], 5) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 1000))
def test_diagonal_is_one_for_any_k(k, seed):
    rng = np.random.default_rng(seed)
    ps = [profile(rng.integers(0, 10, size=(3, 4)), language=str(j)) for j in range(3)]
    m = overlap_matrix(ps, k)
    assert np.all(np.diag(m) == 1.0)
    assert np.array_equal(m, m.T)


def test_group_means():
    m = np.array([[1.0, 0.8, 0.1], [0.8, 1.0, 0.3], [0.1, 0.3, 1.0]])
    assert group_means(m, ["h", "h", "l"]) == pytest.approx((0.8, 0.2))
