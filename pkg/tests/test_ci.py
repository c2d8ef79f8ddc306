"""CI classifier: input building, scoring, dataset construction, training."""

import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialcause.ci import (
    CIClassifier,
    LabeledTriple,
    TrainConfig,
    Triple,
    bce_loss_and_grad,
    build_input,
    build_supervised_set,
    evaluate_classifier,
    evaluate_triples,
    load_checkpoint,
    save_checkpoint,
    train_supervised,
)
from dialcause.corpus import Dialogue, HistoryResponsePair, Utterance
from dialcause.encoders import (
    HashedInteractionEncoder,
    SubprocessEncoderAdapter,
    join_segments,
    split_segments,
)
from dialcause.errors import CheckpointError, NoPositives, SingleClassData


def make_classifier(dim=4096, seed=0):
    return CIClassifier(HashedInteractionEncoder(dim=dim, seed=seed))


def triple(u_j="hi", u_prev="how are you", response="fine", j=0, t=2):
    return Triple(u_j=u_j, u_prev=u_prev, response=response, j=j, t=t)


# -- build_input --


def test_build_input_order():
    assert build_input(triple()) == "fine </s> how are you </s> hi"


def test_build_input_empty_separator():
    assert build_input(triple(), separator="") == "fine how are you hi"


@given(
    st.lists(
        st.text(alphabet="abcdef ", min_size=1, max_size=12).filter(
            lambda s: s.strip() and "</s>" not in s
        ),
        min_size=3,
        max_size=3,
    )
)
def test_split_recovers_three_segments(texts):
    normalized = [" ".join(t.split()) for t in texts if t.split()]
    if len(normalized) != 3:
        return
    joined = join_segments(normalized)
    assert split_segments(joined) == normalized


def test_triple_rejects_bad_candidate_index():
    with pytest.raises(ValueError):
        Triple(u_j="a", u_prev="b", response="c", j=3, t=4)
    with pytest.raises(ValueError):
        Triple(u_j="", u_prev="b", response="c", j=0, t=2)


# -- scoring --


def test_zero_head_scores_half():
    clf = make_classifier()
    for tr in [triple(), triple(u_j="completely different words")]:
        assert clf.score(tr) == 0.5


def test_score_strictly_inside_unit_interval_and_pure():
    clf = make_classifier()
    rng = np.random.default_rng(0)
    clf.weights = rng.normal(size=clf.weights.shape) * 50
    clf.bias = 5.0
    tr = triple()
    first = clf.score(tr)
    assert 0.0 < first < 1.0
    assert clf.score(tr) == first


def test_score_monotone_in_head_scale():
    clf = make_classifier()
    rng = np.random.default_rng(1)
    clf.weights = rng.normal(size=clf.weights.shape)
    tr = triple()
    base_logit = math.log(clf.score(tr) / (1 - clf.score(tr)))
    if abs(base_logit) < 1e-9:
        clf.bias = 0.3
        base_logit = math.log(clf.score(tr) / (1 - clf.score(tr)))
    scaled = clf.clone()
    scaled.weights = clf.weights * 3
    scaled.bias = clf.bias * 3
    scaled_score = scaled.score(tr)
    if base_logit > 0:
        assert scaled_score > clf.score(tr)
    else:
        assert scaled_score < clf.score(tr)


# -- build_supervised_set --


def _dialogue(n=7, prefix="u"):
    return Dialogue(
        id="d",
        source="other",
        utterances=tuple(
            Utterance(i, "generic_a" if i % 2 == 0 else "generic_b", f"{prefix}{i} text")
            for i in range(n)
        ),
    )


def test_supervised_set_partition_and_exclusions():
    d = _dialogue(7)
    pair = HistoryResponsePair(dialogue_id="d", t=6, cause_indices=frozenset({3, 5}))
    triples = build_supervised_set([pair], [d])
    by_j = {ex.triple.j: ex.label for ex in triples}
    # u_5 is u_{t-1}: conditioned on, never a candidate.
    assert sorted(by_j) == [0, 1, 2, 3, 4]
    assert by_j[3] == 1
    assert {j for j, label in by_j.items() if label == 0} == {0, 1, 2, 4}
    assert all(ex.origin == "gold" for ex in triples)
    assert all(ex.triple.u_prev == "u5 text" for ex in triples)


def test_supervised_set_t1_contributes_nothing():
    d = _dialogue(3)
    pair = HistoryResponsePair(dialogue_id="d", t=1, cause_indices=frozenset({0}))
    assert build_supervised_set([pair], [d]) == []


def test_supervised_set_only_prev_cause_all_negative():
    d = _dialogue(5)
    pair = HistoryResponsePair(dialogue_id="d", t=4, cause_indices=frozenset({3}))
    triples = build_supervised_set([pair], [d])
    assert len(triples) == 3
    assert all(ex.label == 0 for ex in triples)


@given(st.integers(2, 9), st.data())
def test_supervised_set_partitions_candidates(t, data):
    d = _dialogue(10)
    causes = data.draw(
        st.sets(st.integers(0, t - 1), min_size=1, max_size=min(2, t))
    )
    pair = HistoryResponsePair(dialogue_id="d", t=t, cause_indices=frozenset(causes))
    triples = build_supervised_set([pair], [d])
    assert {ex.triple.j for ex in triples} == set(range(t - 1))
    for ex in triples:
        assert ex.label == (1 if ex.triple.j in causes else 0)
        assert ex.triple.j != t - 1


# -- training --


def _separable_data():
    # Positives share the word "cause" in u_j; negatives share "noise".
    pos = [
        LabeledTriple(
            triple=Triple(f"cause item{i}", "prev words", "reply words", j=0, t=2),
            label=1, origin="gold", dialogue_id=f"p{i}",
        )
        for i in range(2)
    ]
    neg = [
        LabeledTriple(
            triple=Triple(f"noise item{i}", "prev words", "reply words", j=0, t=2),
            label=0, origin="gold", dialogue_id=f"n{i}",
        )
        for i in range(2)
    ]
    return pos + neg


def test_training_reaches_low_loss_on_separable_data():
    clf = make_classifier()
    data = _separable_data()
    config = TrainConfig(learning_rate=0.5, epochs=200, batch_size=4, seed=0)
    train_supervised(clf, data, config)
    loss, _, _ = bce_loss_and_grad(clf, data)
    assert clf.training_state.steps <= 200
    assert loss < 0.05


def test_default_config_matches_published_settings():
    config = TrainConfig()
    assert config.learning_rate == 2e-5
    assert config.epochs == 10
    assert config.batch_size == 16


def test_training_deterministic_given_seed():
    data = _separable_data()
    curves = []
    weights = []
    for _ in range(2):
        clf = make_classifier()
        train_supervised(clf, data, TrainConfig(learning_rate=0.1, epochs=5, batch_size=4, seed=3))
        curves.append(list(clf.training_state.loss_curve))
        weights.append(clf.weights.copy())
    assert curves[0] == curves[1]
    assert np.array_equal(weights[0], weights[1])


def test_training_rejects_single_class():
    clf = make_classifier()
    data = [ex for ex in _separable_data() if ex.label == 1]
    with pytest.raises(SingleClassData):
        train_supervised(clf, data)


def test_batches_logged_balanced():
    clf = make_classifier()
    data = _separable_data() * 3
    train_supervised(clf, data, TrainConfig(learning_rate=0.1, epochs=3, batch_size=4, seed=1))
    assert clf.training_state.batch_log
    for n_pos, n_neg in clf.training_state.batch_log:
        assert n_pos == n_neg == 2


def test_validation_best_checkpoint_retained():
    clf = make_classifier()
    data = _separable_data()
    valid = _separable_data()
    train_supervised(
        clf, data, TrainConfig(learning_rate=0.5, epochs=20, batch_size=4, seed=0), valid=valid
    )
    best_f1 = max(m["f1"] for m in clf.training_state.validation_curve)
    final = evaluate_triples(clf, valid)
    assert final["f1"] == pytest.approx(best_f1)


# -- gradient check --


def _random_triples(n, rng):
    words = [f"w{k}" for k in range(30)]
    out = []
    for i in range(n):
        def sentence():
            return " ".join(rng.choice(words, size=3))
        out.append(
            LabeledTriple(
                triple=Triple(sentence(), sentence(), sentence(), j=0, t=2),
                label=int(rng.integers(2)),
                origin="gold",
                dialogue_id=f"r{i}",
            )
        )
    return out


def test_head_gradient_matches_central_differences():
    rng = np.random.default_rng(42)
    clf = make_classifier(dim=512, seed=7)
    clf.weights = rng.normal(size=clf.weights.shape) * 0.5
    clf.bias = 0.1
    data = _random_triples(20, rng)
    loss, grad_w, grad_b = bce_loss_and_grad(clf, data)

    def loss_at(w, b):
        probe = clf.clone()
        probe.weights = w
        probe.bias = b
        return bce_loss_and_grad(probe, data)[0]

    h = 1e-6
    active = np.nonzero(grad_w)[0]
    check_dims = list(rng.choice(active, size=min(40, len(active)), replace=False))
    check_dims += list(rng.integers(0, clf.weights.shape[0], size=5))
    for dim in check_dims:
        w_plus = clf.weights.copy()
        w_plus[dim] += h
        w_minus = clf.weights.copy()
        w_minus[dim] -= h
        fd = (loss_at(w_plus, clf.bias) - loss_at(w_minus, clf.bias)) / (2 * h)
        scale = max(abs(fd), abs(grad_w[dim]), 1e-8)
        assert abs(fd - grad_w[dim]) / scale < 1e-5 or abs(fd - grad_w[dim]) < 1e-10
    fd_b = (loss_at(clf.weights, clf.bias + h) - loss_at(clf.weights, clf.bias - h)) / (2 * h)
    assert abs(fd_b - grad_b) / max(abs(fd_b), 1e-8) < 1e-5


# -- evaluation --


def test_all_positive_classifier_recall_one():
    d = _dialogue(6)
    pairs = [
        HistoryResponsePair(dialogue_id="d", t=4, cause_indices=frozenset({2, 3})),
        HistoryResponsePair(dialogue_id="d", t=5, cause_indices=frozenset({4})),
    ]
    clf = make_classifier()
    clf.bias = 10.0  # predicts positive everywhere
    metrics = evaluate_classifier(clf, pairs, [d])
    conf = metrics["confusion"]
    base_rate = (conf["tp"]) / (conf["tp"] + conf["fp"])
    assert metrics["recall"] == 1.0
    assert metrics["precision"] == pytest.approx(base_rate)


def test_f1_equals_harmonic_mean_of_confusion():
    d = _dialogue(6)
    pairs = [HistoryResponsePair(dialogue_id="d", t=4, cause_indices=frozenset({1}))]
    clf = make_classifier()
    rng = np.random.default_rng(5)
    clf.weights = rng.normal(size=clf.weights.shape)
    metrics = evaluate_classifier(clf, pairs, [d])
    conf = metrics["confusion"]
    p = conf["tp"] / (conf["tp"] + conf["fp"]) if conf["tp"] + conf["fp"] else 0.0
    r = conf["tp"] / (conf["tp"] + conf["fn"]) if conf["tp"] + conf["fn"] else 0.0
    expected = 2 * p * r / (p + r) if p + r else 0.0
    assert metrics["f1"] == pytest.approx(expected, abs=0)


def test_evaluate_requires_positives():
    d = _dialogue(6)
    pairs = [HistoryResponsePair(dialogue_id="d", t=4, cause_indices=frozenset({3}))]
    with pytest.raises(NoPositives):
        evaluate_classifier(make_classifier(), pairs, [d])


# -- checkpoints --


def test_checkpoint_roundtrip(tmp_path):
    clf = make_classifier(dim=256, seed=9)
    rng = np.random.default_rng(2)
    clf.weights = rng.normal(size=clf.weights.shape)
    clf.bias = -0.25
    save_checkpoint(clf, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    tr = triple()
    assert loaded.score(tr) == clf.score(tr)
    assert loaded.encoder.config() == clf.encoder.config()


def test_checkpoint_missing_dir(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope")


def test_checkpoint_bad_version(tmp_path):
    clf = make_classifier(dim=64)
    path = save_checkpoint(clf, tmp_path / "ckpt")
    head = path / "head.json"
    content = head.read_text().replace('"format_version": 1', '"format_version": 99')
    head.write_text(content)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- wire protocol --


@pytest.mark.slow
def test_subprocess_encoder_matches_in_process():
    command = [sys.executable, "-m", "dialcause.encoders", "--dim", "128", "--seed", "3"]
    local = HashedInteractionEncoder(dim=128, seed=3)
    with SubprocessEncoderAdapter(command) as remote:
        assert remote.name == local.name
        assert remote.dim == 128
        text = build_input(triple())
        np.testing.assert_allclose(remote.pooled(text), local.pooled(text))
        clf_remote = CIClassifier(remote)
        clf_local = CIClassifier(local)
        rng = np.random.default_rng(0)
        w = rng.normal(size=128)
        clf_remote.weights = w.copy()
        clf_local.weights = w.copy()
        assert clf_remote.score(triple()) == pytest.approx(clf_local.score(triple()))
