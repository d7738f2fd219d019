import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebmlab import crf
from ebmlab import diffcore as dc


def brute_force_logz(node, edge):
    """Independent enumeration oracle for the partition value."""
    l, k = node.shape
    scores = []
    for y in itertools.product(range(k), repeat=l):
        s = sum(node[i, y[i]] for i in range(l))
        s += sum(edge[y[i - 1], y[i]] for i in range(1, l))
        scores.append(s)
    m = max(scores)
    return m + np.log(np.sum(np.exp(np.array(scores) - m)))


def brute_force_argmax(node, edge):
    l, k = node.shape
    best, best_score = None, -np.inf
    for y in itertools.product(range(k), repeat=l):
        s = sum(node[i, y[i]] for i in range(l))
        s += sum(edge[y[i - 1], y[i]] for i in range(1, l))
        if s > best_score:  # first maximum wins, matching lowest-index tie-break
            best, best_score = y, s
    return np.array(best), best_score


def test_score_single_position():
    ch = crf.ChainPotentials(node=np.array([[1.0, 2.0, 3.0]]), edge=np.zeros((3, 3)))
    assert float(crf.score(ch, [2])) == 3.0


def test_score_zero_potentials():
    ch = crf.ChainPotentials(node=np.zeros((4, 2)), edge=np.zeros((2, 2)))
    for y in itertools.product(range(2), repeat=4):
        assert float(crf.score(ch, list(y))) == 0.0


def test_score_hand_set_2x2():
    node = np.array([[0.5, -1.0], [2.0, 0.25]])
    edge = np.array([[0.1, -0.2], [0.3, 0.4]])
    ch = crf.ChainPotentials(node=node, edge=edge)
    # y = (1, 0): node[0,1] + node[1,0] + edge[1,0] = -1.0 + 2.0 + 0.3
    assert float(crf.score(ch, [1, 0])) == pytest.approx(1.3, abs=1e-15)


def test_score_label_out_of_range():
    ch = crf.ChainPotentials(node=np.zeros((2, 2)), edge=np.zeros((2, 2)))
    with pytest.raises(ValueError, match="range"):
        crf.score(ch, [0, 2])


def test_forward_logz_zero_potentials():
    ch = crf.ChainPotentials(node=np.zeros((2, 3)), edge=np.zeros((3, 3)))
    assert float(crf.forward_logz(ch)) == pytest.approx(np.log(9.0), abs=1e-12)


def test_forward_logz_matches_enumeration():
    rng = np.random.default_rng(123)
    for _ in range(100):
        l = rng.integers(1, 7)
        k = rng.integers(1, 5)
        node = rng.normal(size=(l, k)) * 2.0
        edge = rng.normal(size=(k, k))
        ch = crf.ChainPotentials(node=node, edge=edge)
        assert abs(float(crf.forward_logz(ch)) - brute_force_logz(node, edge)) < 1e-10


def test_forward_logz_node_row_shift():
    rng = np.random.default_rng(4)
    node = rng.normal(size=(3, 3))
    edge = rng.normal(size=(3, 3))
    base = float(crf.forward_logz(crf.ChainPotentials(node=node, edge=edge)))
    shifted = node.copy()
    shifted[1] += 2.75
    out = float(crf.forward_logz(crf.ChainPotentials(node=shifted, edge=edge)))
    assert out == pytest.approx(base + 2.75, abs=1e-10)


def test_crf_nll_single_label_class_is_zero():
    ch = crf.ChainPotentials(node=np.array([[1.5], [0.2], [-3.0]]), edge=np.array([[0.7]]))
    assert float(crf.crf_nll(ch, [0, 0, 0])) == pytest.approx(0.0, abs=1e-12)


def test_crf_nll_degenerates_to_softmax_for_l1():
    logits = np.array([0.2, -1.1, 0.9])
    ch = crf.ChainPotentials(node=logits[None, :], edge=np.zeros((3, 3)))
    for y in range(3):
        expected = -np.log(np.exp(logits[y]) / np.exp(logits).sum())
        assert float(crf.crf_nll(ch, [y])) == pytest.approx(expected, abs=1e-12)


def test_crf_nll_gradients_pass_finite_differences():
    rng = np.random.default_rng(99)
    for _ in range(5):
        l, k = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        p = dc.ParamStore()
        p.add("node", rng.normal(size=(l, k)))
        p.add("A", rng.normal(size=(k, k)))
        y = rng.integers(0, k, size=l)
        g = dc.Graph(
            lambda ctx: crf.crf_nll(
                crf.ChainPotentials(node=ctx.param("node"), edge=ctx.param("A")), y
            )
        )
        assert dc.finite_diff_check(g, p) < 1e-4


def test_viterbi_zero_potentials_tie_break():
    ch = crf.ChainPotentials(node=np.zeros((4, 3)), edge=np.zeros((3, 3)))
    labels, s = crf.viterbi(ch)
    np.testing.assert_array_equal(labels, [0, 0, 0, 0])
    assert s == 0.0


def test_viterbi_matches_enumeration():
    rng = np.random.default_rng(55)
    for _ in range(100):
        node = rng.normal(size=(5, 3))
        edge = rng.normal(size=(3, 3))
        ch = crf.ChainPotentials(node=node, edge=edge)
        labels, s = crf.viterbi(ch)
        exp_labels, exp_score = brute_force_argmax(node, edge)
        np.testing.assert_array_equal(labels, exp_labels)
        assert s == pytest.approx(exp_score, abs=1e-10)


def test_viterbi_score_is_self_consistent():
    rng = np.random.default_rng(2)
    node = rng.normal(size=(6, 4))
    edge = rng.normal(size=(4, 4))
    ch = crf.ChainPotentials(node=node, edge=edge)
    labels, s = crf.viterbi(ch)
    assert s == pytest.approx(float(crf.score(ch, labels)), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=4), st.integers())
def test_logz_dominates_every_score(l, k, seed):
    rng = np.random.default_rng(abs(seed) % 2**32)
    node = rng.normal(size=(l, k)) * 3
    edge = rng.normal(size=(k, k))
    ch = crf.ChainPotentials(node=node, edge=edge)
    logz = float(crf.forward_logz(ch))
    for y in itertools.product(range(k), repeat=l):
        s = float(crf.score(ch, list(y)))
        if k == 1:
            assert logz == pytest.approx(s, abs=1e-10)
        else:
            assert logz > s


def test_path_probabilities_normalize():
    rng = np.random.default_rng(8)
    node = rng.normal(size=(4, 3)) * 2
    edge = rng.normal(size=(3, 3))
    ch = crf.ChainPotentials(node=node, edge=edge)
    logz = float(crf.forward_logz(ch))
    total = sum(
        np.exp(float(crf.score(ch, list(y))) - logz)
        for y in itertools.product(range(3), repeat=4)
    )
    assert total == pytest.approx(1.0, abs=1e-10)


def test_learned_start_vector_enters_both_score_and_logz():
    rng = np.random.default_rng(77)
    node = rng.normal(size=(3, 2))
    edge = rng.normal(size=(2, 2))
    start = rng.normal(size=2)
    ch = crf.ChainPotentials(node=node, edge=edge, start=start)
    scores = []
    for y in itertools.product(range(2), repeat=3):
        s = start[y[0]] + sum(node[i, y[i]] for i in range(3))
        s += sum(edge[y[i - 1], y[i]] for i in range(1, 3))
        scores.append(s)
        assert float(crf.score(ch, list(y))) == pytest.approx(s, abs=1e-12)
    m = max(scores)
    expected = m + np.log(np.sum(np.exp(np.array(scores) - m)))
    assert float(crf.forward_logz(ch)) == pytest.approx(expected, abs=1e-10)


def test_batched_helpers_match_per_sequence():
    rng = np.random.default_rng(31)
    b, l, k = 5, 4, 3
    node_b = rng.normal(size=(b, l, k))
    edge = rng.normal(size=(k, k))
    ys = rng.integers(0, k, size=(b, l))
    logzs = crf.forward_logz_batch(node_b, edge)
    scores = crf.score_batch(node_b, edge, ys)
    for i in range(b):
        ch = crf.ChainPotentials(node=node_b[i], edge=edge)
        assert logzs[i] == pytest.approx(float(crf.forward_logz(ch)), abs=1e-12)
        assert scores[i] == pytest.approx(float(crf.score(ch, ys[i])), abs=1e-12)
