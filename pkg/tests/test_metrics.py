"""Metric correctness against independently computed oracle values.

Every frozen constant below was produced by the naive implementations in
oracles.py (Counter arithmetic / scipy reference distributions) before the
package versions were written.
"""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialcause.errors import DegenerateInput
from dialcause.metrics import (
    BWSRecord,
    average_bleu,
    bleu,
    bws_scores,
    cohen_kappa,
    distinct_n,
    self_bleu,
    span_f1,
    two_sample_t_test,
)

from .oracles import (
    naive_average_bleu,
    naive_bleu,
    naive_cohen_kappa,
    naive_distinct_n,
    naive_self_bleu,
    naive_span_f1,
    naive_welch,
)

TOL = 1e-9


# -- Cohen's kappa --

KAPPA_CASES = [
    # ((labels_a, labels_b), expected)
    (([1, 1, 1, 0], [1, 1, 0, 0]), 0.5),  # p_o=3/4, p_e=1/2
    (([1, 1, 0, 0], [1, 0, 1, 0]), 0.0),  # p_o=1/2, p_e=1/2
    (([1, 0, 1, 0], [1, 0, 1, 0]), 1.0),
    (([1, 1, 0, 0], [0, 0, 1, 1]), -1.0),
    (([1, 1, 0, 0, 1, 0], [1, 0, 0, 0, 1, 1]), 1 / 3),  # p_o=2/3, p_e=1/2
]


@pytest.mark.parametrize("labels, expected", KAPPA_CASES)
def test_cohen_kappa_frozen(labels, expected):
    a, b = labels
    assert cohen_kappa(a, b) == pytest.approx(expected, abs=TOL)
    assert naive_cohen_kappa(a, b) == pytest.approx(expected, abs=TOL)


def test_cohen_kappa_degenerate_marginals():
    with pytest.warns(UserWarning, match="degenerate"):
        assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 1.0


def test_cohen_kappa_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        cohen_kappa([1, 0], [1])
    with pytest.raises(ValueError):
        cohen_kappa([], [])


@given(
    st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=2, max_size=40)
)
def test_cohen_kappa_symmetric(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    assert cohen_kappa(a, b) == pytest.approx(cohen_kappa(b, a), abs=TOL)


@given(st.lists(st.integers(0, 1), min_size=2, max_size=40))
def test_cohen_kappa_self_agreement(labels):
    if len(set(labels)) == 2:
        assert cohen_kappa(labels, labels) == pytest.approx(1.0, abs=TOL)


# -- span F1 --

SPAN_CASES = [
    ([set(range(1, 11)), set(range(6, 16))], 0.5),  # P = R = 5/10
    ([{1, 2}, {1, 2}, {1, 2}], 1.0),
    ([{1, 2}, {1, 2}, {9}], 1 / 3),  # pairwise {1.0, 0.0, 0.0}
    ([set(), set()], 1.0),
    ([{1}, set()], 0.0),
    ([{1, 2, 3, 4}, {3, 4, 5, 6}, {1, 2}], 0.3888888888888888),  # (1/2 + 2/3 + 0)/3
]


@pytest.mark.parametrize("sets, expected", SPAN_CASES)
def test_span_f1_frozen(sets, expected):
    assert span_f1(sets) == pytest.approx(expected, abs=TOL)
    assert naive_span_f1(sets) == pytest.approx(expected, abs=TOL)


def test_span_f1_requires_two_annotators():
    with pytest.raises(ValueError):
        span_f1([{1, 2}])


@given(
    st.lists(
        st.sets(st.integers(0, 20), max_size=8), min_size=2, max_size=5
    ),
    st.randoms(),
)
def test_span_f1_permutation_invariant(sets, rng):
    shuffled = list(sets)
    rng.shuffle(shuffled)
    assert span_f1(sets) == pytest.approx(span_f1(shuffled), abs=TOL)


# -- BLEU --

BLEU_CASES = [
    # (hypothesis, references, max_order, expected)
    ("the cat sat on the mat", ["the cat sat on the mat"], 4, 1.0),
    # clipped unigram precision min(3,1)/3 = 1/3
    ("the the the", ["the cat"], 1, 1 / 3),
    # (1/3 * 1/6 * 1/6 * 1)^(1/4); orders 2,3 smoothed, order 4 vacuous
    ("the the the", ["the cat"], 4, 0.31020161970069987),
    # (2/4 * 1/3 * 1/8 * 1/8)^(1/4)
    ("a b c d", ["a b x y"], 4, 0.2259005009024612),
    # exact prefix: precisions 1, brevity exp(1 - 4/2)
    ("a b", ["a b c d"], 2, 0.36787944117144233),
    # clipping across two references covers all bigrams
    ("a b c", ["a b", "b c d"], 2, 1.0),
    ("p q r", ["x y z"], 4, 0.0),
]


@pytest.mark.parametrize("hyp, refs, order, expected", BLEU_CASES)
def test_bleu_frozen(hyp, refs, order, expected):
    h = hyp.split()
    rs = [r.split() for r in refs]
    assert bleu(h, rs, order) == pytest.approx(expected, abs=TOL)
    assert naive_bleu(h, rs, order) == pytest.approx(expected, abs=TOL)


AVG_BLEU_CASES = [
    ("the cat sat", ["the cat sat"], 1.0),
    ("a b c d", ["a b x y"], 0.35232734886021916),
    ("a b", ["a b c d"], 0.36787944117144233),  # e^-1 at every order
    ("p q", ["x y"], 0.0),
    ("we all like language", ["we all love language models"], 0.3533770124184189),
]


@pytest.mark.parametrize("hyp, refs, expected", AVG_BLEU_CASES)
def test_average_bleu_frozen(hyp, refs, expected):
    h = hyp.split()
    rs = [r.split() for r in refs]
    assert average_bleu(h, rs) == pytest.approx(expected, abs=TOL)
    assert naive_average_bleu(h, rs) == pytest.approx(expected, abs=TOL)


def test_bleu_empty_hypothesis():
    assert bleu([], [["a"]], 4) == 0.0


def test_bleu_rejects_bad_order():
    with pytest.raises(ValueError):
        bleu(["a"], [["a"]], 0)


@given(st.lists(st.sampled_from("abcde"), min_size=1, max_size=12))
def test_bleu_identity_is_one(tokens):
    assert bleu(tokens, [tokens], 4) == pytest.approx(1.0, abs=TOL)


@given(
    st.lists(st.sampled_from("abcde"), min_size=1, max_size=10),
    st.lists(st.lists(st.sampled_from("abcde"), min_size=1, max_size=10), min_size=1, max_size=3),
)
def test_bleu_bounded(hyp, refs):
    value = bleu(hyp, refs, 4)
    assert 0.0 <= value <= 1.0 + TOL


# -- distinct-n --

DISTINCT_CASES = [
    ([["a", "a", "a", "a"]], 1, 0.25),
    ([["a", "b"], ["c", "d"]], 1, 1.0),
    ([["a", "b", "c"], ["a", "b", "c"]], 2, 0.5),
    ([["a", "b", "c", "d"], ["c", "d", "e"]], 2, 0.8),  # 4 unique / 5 total
    ([["x", "y", "x", "y"]], 2, 2 / 3),  # xy, yx, xy
]


@pytest.mark.parametrize("outputs, n, expected", DISTINCT_CASES)
def test_distinct_n_frozen(outputs, n, expected):
    assert distinct_n(outputs, n) == pytest.approx(expected, abs=TOL)
    assert naive_distinct_n(outputs, n) == pytest.approx(expected, abs=TOL)


def test_distinct_n_degenerate():
    with pytest.raises(DegenerateInput):
        distinct_n([["a"]], 2)


@given(
    st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=6), min_size=1, max_size=5)
)
def test_distinct_never_increases_with_duplicate(outputs):
    base = distinct_n(outputs, 1)
    extended = distinct_n(outputs + [outputs[0]], 1)
    assert extended <= base + TOL


# -- self-BLEU --

SELF_BLEU_CASES = [
    ([["a", "b", "c"]] * 3, 1.0),
    ([["a", "b", "c", "d", "e"]] * 2, 1.0),
    ([["a", "b"], ["c", "d"], ["e", "f"]], 0.0),
    (
        [["the", "cat", "sat"], ["the", "cat", "ran"], ["a", "dog", "sat"]],
        0.49012384635776846,
    ),
    ([["x", "y"], ["x", "y"], ["p", "q"]], 2 / 3),  # scores 1, 1, 0
]


@pytest.mark.parametrize("candidates, expected", SELF_BLEU_CASES)
def test_self_bleu_frozen(candidates, expected):
    assert self_bleu(candidates) == pytest.approx(expected, abs=TOL)
    assert naive_self_bleu(candidates) == pytest.approx(expected, abs=TOL)


def test_self_bleu_needs_two():
    with pytest.raises(DegenerateInput):
        self_bleu([["a"]])


@settings(max_examples=25)
@given(
    st.lists(st.sampled_from("abc"), min_size=1, max_size=5),
    st.integers(min_value=2, max_value=6),
)
def test_self_bleu_identical_is_one(tokens, k):
    assert self_bleu([tokens] * k) == pytest.approx(1.0, abs=TOL)


# -- best-worst scaling --


def _record(judgments, exp="e1", a="A", b="B"):
    return BWSRecord(
        experiment_id=exp, item_id="i1", system_a=a, system_b=b,
        metric="relevance", judgments=tuple(judgments),
    )


def test_bws_paper_example():
    # 100-item experiment where A nets +13: e.g. 13 extra a_best judgments.
    records = [_record(["a_best"]) for _ in range(13)] + [_record(["tie"]) for _ in range(5)]
    assert bws_scores(records) == {"A": 13, "B": -13}


def test_bws_all_ties():
    assert bws_scores([_record(["tie", "tie", "tie"])]) == {"A": 0, "B": 0}


def test_bws_three_two():
    scores = bws_scores([_record(["a_best", "a_best", "a_best", "b_best", "b_best"])])
    assert scores == {"A": 1, "B": -1}


def test_bws_rejects_mixed_experiments():
    with pytest.raises(ValueError):
        bws_scores([_record(["tie"], exp="e1"), _record(["tie"], exp="e2")])


@given(
    st.lists(
        st.lists(st.sampled_from(["a_best", "b_best", "tie"]), min_size=1, max_size=5),
        min_size=1,
        max_size=10,
    )
)
def test_bws_pairwise_sums_to_zero(judgment_lists):
    records = [_record(j) for j in judgment_lists]
    scores = bws_scores(records)
    assert sum(scores.values()) == 0


# -- Welch t-test --

WELCH_CASES = [
    # (a, b, t, p) frozen from scipy.stats.ttest_ind(equal_var=False)
    ([1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 4.0, 6.0, 8.0, 10.0],
     -1.8973665961010275, 0.10753119493062718),
    ([0.0, 0.0, 0.0, 0.0, 0.0], [10.0, 10.0, 10.0, 10.0, 10.1],
     -501.0000000000018, 9.523329525259539e-11),
    ([10.1, 10.0, 9.9, 10.2, 9.8], [12.0, 8.0, 11.0, 9.0, 10.5],
     -0.13934660285832304, 0.8957873627026984),
    ([1.0, 2.0], [1.5, 2.5], -0.7071067811865475, 0.5527864045000421),
    ([3.1, 2.9, 3.0, 3.2], [2.0, 2.1, 1.9, 2.2], None, None),  # checked vs oracle only
]


@pytest.mark.parametrize("a, b, t_expected, p_expected", WELCH_CASES)
def test_welch_frozen(a, b, t_expected, p_expected):
    result = two_sample_t_test(a, b)
    t_oracle, p_oracle = naive_welch(a, b)
    if t_expected is not None:
        assert result.t_statistic == pytest.approx(t_expected, rel=1e-9)
        assert result.p_value == pytest.approx(p_expected, rel=1e-6)
    assert result.t_statistic == pytest.approx(t_oracle, rel=1e-9)
    assert result.p_value == pytest.approx(p_oracle, rel=1e-6, abs=1e-12)


def test_welch_identical_samples():
    with pytest.warns(UserWarning):
        result = two_sample_t_test([2.0, 2.0, 2.0], [2.0, 2.0, 2.0])
    assert result.t_statistic == 0.0
    assert result.p_value == 1.0
    assert not result.significant
    assert result.flagged


def test_welch_separated_is_significant():
    result = two_sample_t_test([0.0] * 5, [10.0, 10.0, 10.0, 10.0, 10.1])
    assert result.significant


def test_welch_requires_two_values():
    with pytest.raises(ValueError):
        two_sample_t_test([1.0], [1.0, 2.0])


@given(
    st.lists(st.floats(-50, 50), min_size=2, max_size=10),
    st.lists(st.floats(-50, 50), min_size=2, max_size=10),
)
def test_welch_antisymmetric(a, b):
    ab = two_sample_t_test(a, b)
    ba = two_sample_t_test(b, a)
    assert ab.t_statistic == pytest.approx(-ba.t_statistic, abs=1e-9)
    assert ab.p_value == pytest.approx(ba.p_value, abs=1e-9)
