import itertools

import numpy as np
import pytest
import torch

from dialectasr.model import HybridModel
from dialectasr.segmentation import (
    AlignmentInfeasibleError,
    align_corpus,
    align_stream,
    backtrack,
    build_trellis,
    chunk_starts,
    confidence,
    direct_infer,
    join_frames,
    partition_infer,
    window_confidence,
)

from .conftest import random_logprobs
from .test_model import tiny_config


def onehot(labels, c, floor=np.log(1e-6)):
    lp = np.full((len(labels), c), floor)
    lp[np.arange(len(labels)), labels] = 0.0
    return lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)


def exhaustive_best(lp, tokens):
    """Best CTC path over the blank-expanded states, by enumeration."""
    n = lp.shape[0]
    ext = [0] + [x for t in tokens for x in (t, 0)]
    s_len = len(ext)
    best, arg = -np.inf, None
    for states in itertools.product(range(s_len), repeat=n):
        if states[0] > 1 or states[-1] < s_len - 2:
            continue
        ok = True
        for a, b in zip(states, states[1:]):
            d = b - a
            if d < 0 or d > 2 or (d == 2 and (ext[b] == 0 or ext[b] == ext[a])):
                ok = False
                break
        if not ok:
            continue
        score = sum(lp[t, ext[s]] for t, s in enumerate(states))
        if score > best:
            best, arg = score, states
    entry = [arg.index(2 * k + 1) for k in range(len(tokens))]
    return best, entry


@pytest.mark.parametrize("seed", range(40))
def test_backtrack_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    k = int(rng.integers(1, min(3, n) + 1))
    tokens = [int(x) for x in rng.integers(1, 4, size=k)]
    lp = random_logprobs(rng, n, 4)
    try:
        tr = build_trellis(lp, tokens)
    except AlignmentInfeasibleError:
        assert sum(1 for a, b in zip(tokens, tokens[1:]) if a == b) + k > n
        return
    ali = backtrack(tr)
    best, entry = exhaustive_best(lp, tokens)
    assert abs(ali.score - best) < 1e-9
    assert ali.token_frames == entry
    # path validity: tokens entered in order, each on a frame emitting that token's state
    assert ali.token_frames == sorted(ali.token_frames)
    assert all(f <= l for f, l in zip(ali.token_frames, ali.token_last))


def test_trellis_origin_and_monotone():
    rng = np.random.default_rng(0)
    tr = build_trellis(random_logprobs(rng, 6, 4), [1, 2])
    assert tr.scores[0, 0] == 0.0
    assert np.all(np.isneginf(tr.scores[0, 1:]))
    col = tr.scores[:, 0]
    assert np.all(np.diff(col) <= 0)


def test_last_token_timing_at_peak():
    lp = np.log(np.array([[0.8, 0.2], [0.6, 0.4], [0.1, 0.9]]))
    assert backtrack(build_trellis(lp, [1])).last_token_frame == 2


def test_last_token_tie_takes_earliest():
    lp = np.log(np.full((4, 2), 0.5))
    assert backtrack(build_trellis(lp, [1])).last_token_frame == 0


def test_onehot_path():
    lp = onehot([0, 1, 0, 0, 2, 0, 0, 3, 0], 4, floor=-np.inf)
    ali = backtrack(build_trellis(lp, [1, 2, 3]))
    assert ali.token_frames == [1, 4, 7]
    assert ali.score == 0.0
    assert confidence(lp, [1, 2, 3], ali.token_frames) == 1.0


def test_infeasible():
    with pytest.raises(AlignmentInfeasibleError):
        build_trellis(np.zeros((2, 3)), [1, 1])
    with pytest.raises(ValueError):
        build_trellis(np.zeros((4, 3)), [0])


def test_all_blank_posteriors_give_low_confidence():
    lp = onehot([0] * 8, 4)
    ali = backtrack(build_trellis(lp, [1, 2]))
    assert confidence(lp, [1, 2], ali.token_frames) < 1e-5


def test_window_confidence():
    assert window_confidence([0.0, np.log(0.1), 0.0], window=1) == pytest.approx(0.1)
    assert window_confidence([0.0, 0.0], window=3) == 1.0
    assert window_confidence([np.log(0.5)] * 4 + [np.log(0.125)] * 3) == pytest.approx(0.125)
    assert window_confidence([]) == 0.0


def _three_utterance_fixture(corrupt=None):
    texts = [[1, 2], [3, 1], [2, 3]]
    labels = [0, 1, 0, 2, 0, 0, 0, 3, 0, 1, 0, 0, 0, 2, 0, 3, 0]
    lp = onehot(labels, 4, floor=np.log(0.02))
    if corrupt is not None:
        lp[corrupt] = np.log(np.full(4, 0.25))
    return lp, texts


def test_corrupted_middle_utterance_scores_lowest():
    lp, texts = _three_utterance_fixture(corrupt=[7, 9])
    res = align_stream(lp, texts, ["a", "b", "c"], ["", "", ""])
    conf = [s.confidence for s in res.segments]
    assert conf[1] < min(conf[0], conf[2])


def test_stream_boundaries_and_ordering():
    lp, texts = _three_utterance_fixture()
    res = align_stream(lp, texts, ["a", "b", "c"], ["x", "y", "z"])
    assert [s.id for s in res.segments] == ["a", "b", "c"]
    assert res.alignment.token_frames == [1, 3, 7, 9, 13, 15]
    # midpoints of blank runs [0,1), [4,7), [10,13), [16,17)
    assert res.boundaries == [0, 5, 11, 16]
    for a, b in zip(res.segments, res.segments[1:]):
        assert a.start_frame < a.end_frame <= b.start_frame < b.end_frame
    for seg, k in zip(res.segments, (0, 2, 4)):
        assert seg.start_frame <= res.alignment.token_frames[k] and res.alignment.token_last[k + 1] < seg.end_frame


def test_filler_tags_pass_as_blank(vocab):
    co = vocab.tag_id("CO")
    labels = [0, co, 1, 0, 2, 0]
    lp = onehot(labels, vocab.ctc_dim, floor=np.log(1e-4))
    plain = backtrack(build_trellis(lp, [1, 2]))
    filled = backtrack(build_trellis(lp, [1, 2], filler_ids=vocab.tag_ids))
    assert filled.score > plain.score
    assert filled.token_frames == [2, 4]


def test_chunking_helpers():
    assert chunk_starts(12000, 6000, 10) == [0, 5990, 6000]
    assert chunk_starts(6000, 6000, 10) == [0]
    starts = chunk_starts(13000, 6000, 10)
    assert starts[-1] + 6000 == 13000
    for a, b in zip(starts, starts[1:]):
        assert b <= a + 6000 - 10
    joins = join_frames(13000, 6000, 10)
    assert all(b <= j < a + 6000 for a, b, j in zip(starts, starts[1:], joins))


def _tiny_model(vocab, seed=0):
    torch.manual_seed(seed)
    return HybridModel(tiny_config(), vocab).eval()


def test_partition_pass_through_is_bitwise(vocab):
    model = _tiny_model(vocab)
    feats = np.random.default_rng(0).normal(size=(200, 4)).astype(np.float32)
    assert np.array_equal(partition_infer(model, feats, max_frames=60, overlap_frames=5), direct_infer(model, feats))


def test_partition_length_invariance(vocab):
    model = _tiny_model(vocab)
    feats = np.random.default_rng(1).normal(size=(800, 4)).astype(np.float32)
    n = direct_infer(model, feats).shape[0]
    for max_frames, overlap in [(60, 5), (90, 10), (150, 0), (199, 40)]:
        assert partition_infer(model, feats, max_frames, overlap).shape == (n, vocab.ctc_dim)
    with pytest.raises(ValueError):
        partition_infer(model, feats, 20, 10)


def test_align_corpus_threshold(vocab):
    model = _tiny_model(vocab)
    feats = np.random.default_rng(2).normal(size=(400, 4)).astype(np.float32)
    texts = [["w01", "w02"], ["w03"], ["w04", "w05"], ["w06"], ["w07", "w01"]]
    kept = align_corpus(model, feats, texts, threshold=0.0)
    assert [s.id for s in kept] == [f"utt{i:04d}" for i in range(5)]
    assert [s.text for s in kept] == [" ".join(t) for t in texts]
    assert all(0.0 <= s.confidence <= 1.0 for s in kept)
    assert align_corpus(model, feats, texts, threshold=1.1) == []
    with pytest.raises(ValueError):
        align_corpus(model, feats, [])
