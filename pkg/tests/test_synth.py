import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab.errors import ConfigError, InputError
from moelab.synth import (
    LanguageSpec,
    generate,
    make_benchmark_suite,
    read_corpus,
    read_suite_manifest,
    sampling_distribution,
    write_corpus,
    write_suite_manifest,
)


def spec(**kw):
    base = dict(label="x", vocab_range=(10, 30), resource_level=5000, seed=4, vocab_size=64)
    base.update(kw)
    return LanguageSpec(**base)


def test_same_spec_gives_identical_corpora():
    assert generate(spec(), 40, 12) == generate(spec(), 40, 12)
    assert generate(spec(), 40, 12) != generate(spec(seed=5), 40, 12)


def test_disjoint_languages_share_no_token_types():
    a_train, a_test = generate(spec(label="a", vocab_range=(0, 20)), 30, 10)
    b_train, b_test = generate(spec(label="b", vocab_range=(20, 40)), 30, 10)
    types_a = a_train.token_types() | a_test.token_types()
    types_b = b_train.token_types() | b_test.token_types()
    assert types_a and types_b and not types_a & types_b


def test_unigram_sampling_matches_its_distribution():
    s = spec(ngram_order=1, resource_level=100_000)
    train, test = generate(s, 1000, 100)
    tokens, p = sampling_distribution(s)
    seen = np.array([t for c in (train, test) for seq in c.sequences for t in seq])
    assert seen.size == 100_000
    empirical = np.array([np.sum(seen == t) for t in tokens]) / seen.size
    assert 0.5 * np.abs(empirical - p).sum() <= 0.05


def test_prefix_split_is_ninety_ten():
    train, test = generate(spec(), 50, 8)
    assert (len(train.sequences), len(test.sequences)) == (45, 5)
    assert (train.split, test.split) == ("train", "held-out")


def test_budget_and_spec_validation():
    with pytest.raises(ConfigError):
        generate(spec(resource_level=100), 20, 10)
    with pytest.raises(ConfigError):
        spec(vocab_range=(5, 5))
    with pytest.raises(ConfigError):
        spec(vocab_range=(60, 70))
    with pytest.raises(ConfigError):
        spec(resource_level=0)
    with pytest.raises(ConfigError):
        spec(ngram_order=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.floats(0.0, 0.5))
def test_tokens_stay_inside_the_permitted_set(seed, order, overlap):
    for s in make_benchmark_suite(1, 2, 48, overlap, low_budget=200, ngram_order=order, seed=seed):
        allowed = set(s.tokens.tolist())
        for c in generate(s, 10, 8):
            assert c.token_types() <= allowed


def test_zero_overlap_suite_is_pairwise_disjoint():
    specs = make_benchmark_suite(2, 2, 64, 0.0)
    sets = [set(s.tokens.tolist()) for s in specs]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not sets[i] & sets[j]


def test_suite_budgets_are_ten_to_one():
    specs = make_benchmark_suite(2, 2, 256, 0.0)
    assert [s.label for s in specs] == ["hr0", "hr1", "lr0", "lr1"]
    budgets = [s.resource_level for s in specs]
    assert [b // budgets[-1] for b in budgets] == [10, 10, 1, 1]
    assert all(b % budgets[-1] == 0 for b in budgets)


def test_full_overlap_shares_the_whole_vocabulary():
    for s in make_benchmark_suite(2, 2, 64, 1.0):
        assert s.tokens.tolist() == list(range(64))


def test_suite_validation():
    with pytest.raises(ConfigError):
        make_benchmark_suite(3, 3, 5, 0.0)
    with pytest.raises(ConfigError):
        make_benchmark_suite(1, 1, 64, 1.5)
    with pytest.raises(ConfigError):
        make_benchmark_suite(0, 0, 64, 0.0)


def test_high_resource_corpora_are_larger():
    specs = make_benchmark_suite(1, 1, 32, 0.0, low_budget=300)
    hr, lr = (generate(s, s.resource_level // 10, 10)[0] for s in specs)
    assert hr.n_tokens > lr.n_tokens


def test_corpus_and_manifest_files_round_trip(tmp_path):
    train, _ = generate(spec(), 20, 7)
    write_corpus(train, tmp_path / "x.txt")
    back = read_corpus(tmp_path / "x.txt", "x")
    assert back.sequences == train.sequences
    specs = make_benchmark_suite(1, 1, 32, 0.1)
    files = {s.label: {"corpus": f"{s.label}.txt", "n_train": 9} for s in specs}
    write_suite_manifest(specs, files, tmp_path / "suite.json")
    assert read_suite_manifest(tmp_path / "suite.json") == [(s, files[s.label]) for s in specs]
    (tmp_path / "bad.txt").write_text("1 2 x\n")
    with pytest.raises(InputError):
        read_corpus(tmp_path / "bad.txt")
