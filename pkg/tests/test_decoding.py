import itertools
import logging

import numpy as np
import pytest
import torch

from dialectasr.ctc import ctc_loss
from dialectasr.decoding import (
    BeamConfig,
    DecoderScorer,
    FusionError,
    joint_beam_search,
    shallow_fuse,
    strip_tag,
)
from dialectasr.model import HybridModel

from .conftest import random_logprobs
from .test_model import tiny_config


class TableScorer:
    """Next-token log-probs looked up by prefix tuple, with a default row."""

    def __init__(self, vocab_size, table=None, default=None):
        self.vocab_size = vocab_size
        self.table = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in (table or {}).items()}
        self.default = np.full(vocab_size, -np.log(vocab_size)) if default is None else np.asarray(default)
        self.calls = 0

    def batch_score(self, prefixes):
        self.calls += 1
        return np.stack([self.table.get(tuple(p), self.default) for p in prefixes])


def _setup(vocab, seed=0, frames=40):
    torch.manual_seed(seed)
    model = HybridModel(tiny_config(), vocab).double().eval()
    x = torch.as_tensor(np.random.default_rng(seed).normal(size=(1, frames, 4)))
    with torch.no_grad():
        enc = model.encode(x)
    dec = DecoderScorer(model.decoder, enc.hidden, enc.mask)
    return model, x, dec, enc.ctc_logprobs[0].numpy()


def _greedy(dec, sos, eos, max_len):
    seq = [sos]
    for _ in range(max_len + 1):
        tok = int(np.argmax(dec.batch_score([seq])[0]))
        seq.append(tok)
        if tok == eos:
            break
    return seq


@pytest.mark.parametrize("seed", range(4))
def test_beam1_no_ctc_is_greedy_attention(vocab, seed):
    _, _, dec, ctc_lp = _setup(vocab, seed)
    cfg = BeamConfig(beam=1, ctc_weight=0.0, lm_weight=0.0, max_len=12)
    hyp = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos)[0]
    assert hyp.tokens == _greedy(dec, vocab.sos, vocab.eos, 12)[: len(hyp.tokens)]
    if not hyp.truncated:
        assert hyp.tokens[-1] == vocab.eos


def _exhaustive_ctc_best(lp, labels, max_len):
    best, arg = -np.inf, None
    for n in range(max_len + 1):
        for seq in itertools.product(labels, repeat=n):
            try:
                s = -ctc_loss(lp, list(seq)).item()
            except ValueError:
                continue
            if s > best:
                best, arg = s, list(seq)
    return arg, best


@pytest.mark.parametrize("seed", range(25))
def test_pure_ctc_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    lp = random_logprobs(rng, 3, 3)  # blank + 2 labels
    sos = eos = 3
    hyps = joint_beam_search(None, lp, BeamConfig(beam=4, ctc_weight=1.0, lm_weight=0.0), sos, eos)
    arg, best = _exhaustive_ctc_best(lp, [1, 2], 3)
    assert hyps[0].output == arg
    assert abs(hyps[0].score - best) < 1e-9
    assert abs(hyps[0].ctc - best) < 1e-9


def test_score_additivity(vocab):
    model, x, dec, ctc_lp = _setup(vocab, 1)
    cfg = BeamConfig(beam=4, ctc_weight=0.3, lm_weight=0.0)
    hyps = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos)
    assert hyps and all(h.finished and h.tokens[-1] == vocab.eos for h in hyps)
    assert [h.score for h in hyps] == sorted([h.score for h in hyps], reverse=True)
    for h in hyps:
        with torch.no_grad():
            tf = model.sequence_logprob(x[0], h.tokens[1:]).item()
        assert abs(h.att - tf) < 1e-9
        assert abs(h.ctc + ctc_loss(ctc_lp, h.output).item()) < 1e-6
        assert abs(h.score - h.recombine(cfg)) < 1e-9


def test_zero_weight_lm_is_invisible(vocab):
    _, _, dec, ctc_lp = _setup(vocab, 2)
    cfg = BeamConfig(beam=3, ctc_weight=0.3, lm_weight=0.0)
    rng = np.random.default_rng(0)
    lm = TableScorer(vocab.output_dim, default=random_logprobs(rng, 1, vocab.output_dim)[0])
    a = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos)
    b = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos, lm=lm)
    assert [h.tokens for h in a] == [h.tokens for h in b]
    assert [h.score for h in a] == [h.score for h in b]
    assert lm.calls == 0


def test_uniform_lm_keeps_ranking_among_equal_lengths(vocab):
    _, _, dec, ctc_lp = _setup(vocab, 3)
    base = joint_beam_search(dec, ctc_lp, BeamConfig(beam=3, lm_weight=0.0, max_len=3), vocab.sos, vocab.eos)
    fused = joint_beam_search(dec, ctc_lp, BeamConfig(beam=3, lm_weight=0.3, max_len=3), vocab.sos, vocab.eos,
                              lm=TableScorer(vocab.output_dim))
    step = -np.log(vocab.output_dim)
    for h in fused:
        assert abs(h.lm - step * (len(h.tokens) - 1)) < 1e-12
    assert fused[0].tokens == base[0].tokens


def test_tag_aware_lm_flips_tag_choice(vocab):
    # hand-scored 2-step fixture: the decoder slightly prefers [UL], the LM strongly prefers [CO]
    ul, co, mu = vocab.tag_ids
    v, sos, eos = vocab.output_dim, vocab.sos, vocab.eos
    floor = np.log(1e-6)
    def row(probs):
        r = np.full(v, floor)
        for k, p in probs.items():
            r[k] = np.log(p)
        return r
    dec = TableScorer(v, {
        (sos,): row({ul: 0.5, co: 0.45, mu: 0.05}),
        (sos, ul): row({eos: 1.0}),
        (sos, co): row({eos: 1.0}),
        (sos, mu): row({eos: 1.0}),
    }, default=row({eos: 1.0}))
    lm = TableScorer(v, {(sos,): row({ul: 0.1, co: 0.8, mu: 0.1})}, default=row({eos: 1.0}))
    cfg0 = BeamConfig(beam=3, ctc_weight=0.0, lm_weight=0.0, max_len=2)
    cfg3 = BeamConfig(beam=3, ctc_weight=0.0, lm_weight=0.3, max_len=2)
    assert joint_beam_search(dec, None, cfg0, sos, eos, lm=lm)[0].output == [ul]
    fused = joint_beam_search(dec, None, cfg3, sos, eos, lm=lm)[0]
    assert fused.output == [co]
    # 0.3 * (log .8 - log .1) = 0.624 > log .5 - log .45 = 0.105
    assert abs(fused.score - (np.log(0.45) + 0.3 * np.log(0.8))) < 1e-9


def test_shallow_fuse_and_vocab_mismatch(vocab):
    lm = TableScorer(vocab.output_dim, default=np.log(np.full(vocab.output_dim, 1 / vocab.output_dim)))
    assert abs(shallow_fuse([vocab.sos], 3, lm, 0.3) - 0.3 * np.log(1 / vocab.output_dim)) < 1e-12
    _, _, dec, ctc_lp = _setup(vocab, 0)
    with pytest.raises(FusionError):
        joint_beam_search(dec, ctc_lp, BeamConfig(), vocab.sos, vocab.eos, lm=TableScorer(vocab.output_dim + 1))


def test_truncation_flag():
    lp = np.log(np.array([[0.1, 0.9], [0.1, 0.9], [0.1, 0.9]]))
    sos = eos = 2
    # decoder never wants eos within max_len
    dec = TableScorer(3, default=np.array([-np.inf, 0.0, -np.inf]))
    cfg = BeamConfig(beam=2, ctc_weight=0.0, lm_weight=0.0, max_len=0)
    hyps = joint_beam_search(dec, lp, cfg, sos, eos)
    assert len(hyps) == 1 and hyps[0].truncated and not hyps[0].finished


def test_determinism_across_thread_counts(vocab):
    _, _, dec, ctc_lp = _setup(vocab, 4)
    cfg = BeamConfig(beam=4)
    a = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos)
    torch.set_num_threads(2)
    b = joint_beam_search(dec, ctc_lp, cfg, vocab.sos, vocab.eos)
    assert [(h.tokens, h.score) for h in a] == [(h.tokens, h.score) for h in b]


@pytest.mark.parametrize("seed", range(6))
def test_beam_monotonicity(vocab, seed):
    _, _, dec, ctc_lp = _setup(vocab, seed, frames=32)
    best = [joint_beam_search(dec, ctc_lp, BeamConfig(beam=b), vocab.sos, vocab.eos)[0].score for b in range(1, 6)]
    assert all(b2 >= b1 - 1e-12 for b1, b2 in zip(best, best[1:])), best


def test_force_tag_first(vocab):
    _, _, dec, ctc_lp = _setup(vocab, 5)
    hyps = joint_beam_search(dec, ctc_lp, BeamConfig(beam=3, force_tag_first=True), vocab.sos, vocab.eos,
                             tag_ids=vocab.tag_ids)
    assert all(vocab.is_tag_id(h.output[0]) for h in hyps if h.output)


def test_beam_config_validation():
    for bad in (BeamConfig(beam=0), BeamConfig(ctc_weight=float("nan")), BeamConfig(ctc_weight=1.5)):
        with pytest.raises(ValueError):
            bad.validate()


def test_strip_tag_examples(vocab, caplog):
    co, ul = vocab.tag_id("CO"), vocab.tag_id("UL")
    assert strip_tag([co, 1, 2], vocab) == ("CO", [1, 2], False)
    assert strip_tag([1, 2], vocab) == (None, [1, 2], False)
    with caplog.at_level(logging.WARNING):
        out = strip_tag([co, 1, ul, 2], vocab)
    assert out == ("CO", [1, 2], True)
    assert "malformed" in caplog.text
    assert strip_tag([vocab.sos, co, 3], vocab).tokens == [3]
