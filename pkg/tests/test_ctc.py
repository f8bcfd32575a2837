import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import gspeech.numerics as nx
from gspeech.ctc import (Alphabet, ctc_greedy_decode, ctc_greedy_ids, ctc_loss, min_frames)
from gspeech.numerics import Tensor, grad_check


def collapse(path, blank=0):
    out, prev = [], None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def brute_force_loss(lp, target, blank=0):
    """-log of the summed probability of every length-T path that collapses to target."""
    T, V = lp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) == list(target):
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def random_case(rng):
    T = int(rng.integers(1, 9))
    V = int(rng.integers(2, 6))
    L = int(rng.integers(0, 5))
    target = [int(x) for x in rng.integers(1, V, size=L)]
    logits = rng.normal(0, 2, size=(T, V))
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return lp, target


def test_single_frame_single_symbol():
    lp = np.log(np.array([[0.3, 0.7]]))
    assert ctc_loss(Tensor(lp), [1]).loss.item() == pytest.approx(-math.log(0.7), rel=1e-12)


def test_two_frames_by_hand():
    p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    want = -math.log(p[0, 1] * p[1, 1] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0])
    assert ctc_loss(Tensor(np.log(p)), [1]).loss.item() == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    lp, target = random_case(rng)
    res = ctc_loss(Tensor(lp), target)
    ref = brute_force_loss(lp, target)
    if math.isinf(ref):
        assert not res.feasible and math.isinf(res.loss.item())
    else:
        assert res.feasible
        assert abs(res.loss.item() - ref) <= 1e-6 * abs(ref) + 1e-12


def test_infeasible_flagged():
    lp = np.log(np.full((2, 3), 1 / 3))
    res = ctc_loss(Tensor(lp), [1, 1])  # needs a blank between the repeats
    assert not res.feasible and res.loss.item() == math.inf
    assert min_frames([1, 1]) == 3 and min_frames([1, 2]) == 2


def test_total_probability_at_most_one():
    rng = np.random.default_rng(11)
    for _ in range(30):
        lp, target = random_case(rng)
        res = ctc_loss(Tensor(lp), target)
        if res.feasible:
            assert -res.loss.item() <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    logits = Tensor(rng.normal(size=(7, 4)))
    target = [1, 2, 2]
    err = grad_check(lambda: ctc_loss(nx.log_softmax(logits, -1), target).loss, [logits])
    assert err <= 1e-4


def test_rejects_blank_in_target():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [0, 1])


def test_greedy_collapse_rule():
    a = Alphabet.from_chars("ab")
    frames = [1, 1, 0, 1, 2]  # a a - a b
    lp = np.log(np.eye(3)[frames] * 0.9 + 0.05)
    assert ctc_greedy_decode(lp, a) == "aab"
    assert ctc_greedy_decode(np.log(np.eye(3)[[0, 0, 0]] * 0.9 + 0.05), a) == ""


def test_greedy_equals_best_path_collapse():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lp = np.log(rng.dirichlet(np.ones(3), size=3))
        best = max(itertools.product(range(3), repeat=3),
                   key=lambda path: sum(lp[t, k] for t, k in enumerate(path)))
        assert ctc_greedy_ids(lp) == collapse(best)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_greedy_output_has_no_blank(frames):
    lp = np.log(np.eye(5)[frames] * 0.96 + 0.01)
    ids = ctc_greedy_ids(lp)
    assert 0 not in ids
    # adjacent equal outputs only if separated by a blank in the frames
    runs = [k for k, _ in itertools.groupby(frames)]
    assert ids == [k for k in runs if k != 0]


def test_alphabet_english_and_encode():
    a = Alphabet.english()
    assert len(a) == 42 and a.blank_index == 0
    assert a.decode(a.encode("hi there.")) == "hi there."
    with pytest.raises(ValueError):
        a.encode("Q")
