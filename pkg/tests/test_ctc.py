import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from .conftest import random_logprobs
from dialectasr.autodiff import grad_check
from dialectasr.ctc import (
    CtcInfeasibleError,
    CtcPrefixScorer,
    OracleBoundError,
    collapse,
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_bruteforce,
    ctc_prefix_score,
)


def onehot_lp(labels, c, floor=-30.0):
    lp = np.full((len(labels), c), floor)
    lp[np.arange(len(labels)), labels] = 0.0
    return lp


def test_uniform_two_frames_is_ln3():
    lp = np.log(np.full((2, 3), 1 / 3))
    assert abs(ctc_loss(lp, [1]).item() - math.log(3)) < 1e-12
    assert abs(ctc_loss_bruteforce(lp, [1]) - math.log(3)) < 1e-12


def test_infeasible_targets_raise():
    with pytest.raises(CtcInfeasibleError):
        ctc_loss(np.log(np.full((1, 3), 1 / 3)), [1, 2])
    with pytest.raises(CtcInfeasibleError):
        ctc_loss(np.log(np.full((2, 3), 1 / 3)), [1, 1])
    ctc_loss(np.log(np.full((3, 3), 1 / 3)), [1, 1])


def test_bruteforce_bound_and_no_path():
    with pytest.raises(OracleBoundError):
        ctc_loss_bruteforce(np.zeros((9, 2)), [1])
    with pytest.raises(OracleBoundError):
        ctc_loss_bruteforce(np.zeros((2, 6)), [1])
    assert ctc_loss_bruteforce(np.log(np.full((1, 3), 1 / 3)), [1, 2]) == float("inf")


def test_single_frame_single_token():
    lp = random_logprobs(np.random.default_rng(0), 1, 4)
    assert abs(ctc_loss_bruteforce(lp, [2]) + lp[0, 2]) < 1e-12
    assert abs(ctc_loss(lp, [2]).item() + lp[0, 2]) < 1e-12


def test_matches_bruteforce_200_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n, c = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        target = list(rng.integers(1, c, size=int(rng.integers(0, n + 1))))
        oracle = ctc_loss_bruteforce(lp := random_logprobs(rng, n, c), target)
        if oracle == float("inf"):
            with pytest.raises(CtcInfeasibleError):
                ctc_loss(lp, target)
        else:
            assert abs(ctc_loss(lp, target).item() - oracle) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(2, 4), st.data())
def test_batched_equals_single(n, c, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 10**6)))
    lengths, targets, lps = [], [], []
    for _ in range(3):
        ln = int(rng.integers(1, n + 1))
        tgt = [int(x) for x in rng.integers(1, c, size=int(rng.integers(0, ln + 1)))]
        from dialectasr.ctc import min_frames

        while min_frames(tgt) > ln:
            tgt = tgt[:-1]
        lengths.append(ln)
        targets.append(tgt)
        lps.append(random_logprobs(rng, n, c))
    batch = ctc_loss_batch(torch.tensor(np.stack(lps)), lengths, targets)
    for b in range(3):
        assert abs(batch[b].item() - ctc_loss(lps[b][: lengths[b]], targets[b]).item()) < 1e-9


def test_probabilities_sum_to_at_most_one():
    rng = np.random.default_rng(2)
    for n in range(1, 5):
        lp = random_logprobs(rng, n, 3)
        total = 0.0
        for k in range(n + 1):
            for tgt in itertools.product([1, 2], repeat=k):
                if ctc_loss_bruteforce(lp, tgt) < float("inf"):
                    total += math.exp(-ctc_loss(lp, list(tgt)).item())
        assert total <= 1 + 1e-9
        assert total > 1 - 1e-9  # every path collapses to some label sequence


def test_gradient_finite_differences():
    rng = np.random.default_rng(3)
    z = torch.tensor(rng.normal(size=(4, 3)), dtype=torch.float64, requires_grad=True)
    err = grad_check(lambda: ctc_loss(torch.log_softmax(z, -1), [1, 2]), [z])
    assert err < 1e-4


def test_greedy_examples():
    a, b = 1, 2
    assert ctc_greedy_decode(onehot_lp([a, a, 0, b], 3)) == [a, b]
    assert ctc_greedy_decode(onehot_lp([0, 0, 0], 3)) == []
    assert ctc_greedy_decode(onehot_lp([a, 0, a], 3)) == [a, a]
    # ties go to the lowest id
    assert ctc_greedy_decode(np.log(np.full((2, 3), 1 / 3))) == []
    tie = np.log(np.array([[0.1, 0.45, 0.45]]))
    assert ctc_greedy_decode(tie) == [1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=10))
def test_greedy_onehot_is_collapse(path):
    assert ctc_greedy_decode(onehot_lp(path, 4)) == collapse(path)


def test_prefix_increments_sum_to_sequence_prob():
    rng = np.random.default_rng(4)
    for _ in range(30):
        lp = random_logprobs(rng, 6, 4)
        seq = [int(x) for x in rng.integers(1, 4, size=int(rng.integers(1, 4)))]
        scorer = CtcPrefixScorer(lp)
        state = scorer.initial_state()
        total, prev = 0.0, 0.0
        for tok in seq:
            state, inc = scorer.score(state, tok)
            total += inc
            assert state.log_psi <= prev + 1e-12  # prefix probability never grows
            prev = state.log_psi
        final = scorer.final_score(state)
        assert abs(final + ctc_loss(lp, seq).item()) < 1e-6
        assert total <= 1e-12


def test_prefix_score_functional_form():
    lp = random_logprobs(np.random.default_rng(5), 5, 3)
    s1, inc1 = ctc_prefix_score(None, 1, lp)
    s2, inc2 = ctc_prefix_score(s1, 2, lp)
    scorer = CtcPrefixScorer(lp)
    final = scorer.final_score(s2)
    assert abs(final + ctc_loss(lp, [1, 2]).item()) < 1e-6


def test_empty_prefix_is_all_blank_probability():
    lp = random_logprobs(np.random.default_rng(6), 4, 3)
    scorer = CtcPrefixScorer(lp)
    assert abs(scorer.final_score(scorer.initial_state()) + ctc_loss_bruteforce(lp, [])) < 1e-9


def test_blank_is_not_a_label():
    scorer = CtcPrefixScorer(np.log(np.full((3, 3), 1 / 3)))
    with pytest.raises(ValueError):
        scorer.score(scorer.initial_state(), 0)
