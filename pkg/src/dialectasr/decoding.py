"""Label-synchronous joint CTC/attention beam search with LM shallow fusion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Protocol, Sequence

import numpy as np
import torch

from .ctc import NEG_INF, CtcPrefixScorer, CtcPrefixState
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

_IMPOSSIBLE = NEG_INF / 2


class FusionError(ValueError):
    pass


class PrefixScorer(Protocol):
    vocab_size: int

    def batch_score(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """(len(prefixes), vocab_size) next-token log-probabilities."""


@dataclass
class BeamConfig:
    beam: int = 10
    ctc_weight: float = 0.3
    lm_weight: float = 0.3
    length_bonus: float = 0.0
    max_len: Optional[int] = None  # defaults to the number of encoder frames
    force_tag_first: bool = False

    def validate(self) -> None:
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        for name in ("ctc_weight", "lm_weight", "length_bonus"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")


@dataclass
class Hypothesis:
    tokens: List[int]  # starts with sos; ends with eos once finished
    att: float = 0.0
    ctc: float = 0.0
    lm: float = 0.0
    score: float = 0.0
    ctc_state: Optional[CtcPrefixState] = field(default=None, repr=False)
    finished: bool = False
    truncated: bool = False

    @property
    def output(self) -> List[int]:
        """Emitted tokens without sos/eos."""
        end = -1 if self.finished else None
        return self.tokens[1:end]

    def recombine(self, cfg: BeamConfig) -> float:
        n = len(self.tokens) - 1
        return (1 - cfg.ctc_weight) * self.att + cfg.ctc_weight * self.ctc + cfg.lm_weight * self.lm + cfg.length_bonus * n


class DecoderScorer:
    """Adapts a :class:`~dialectasr.blocks.TransformerDecoder` and one utterance's encoder output."""

    def __init__(self, decoder, memory: torch.Tensor, mask: torch.Tensor | None = None):
        self.decoder = decoder
        self.memory = memory if memory.dim() == 3 else memory[None]
        self.mask = mask if mask is not None else torch.ones(self.memory.shape[:2], dtype=torch.bool)
        self.vocab_size = decoder.vocab_size

    @torch.no_grad()
    def batch_score(self, prefixes):
        tokens = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long)
        n = tokens.shape[0]
        mem = self.memory.expand(n, -1, -1)
        mask = self.mask.expand(n, -1)
        return self.decoder(tokens, mem, mask)[:, -1].double().numpy()


def shallow_fuse(prefix: Sequence[int], next_token: int, lm: PrefixScorer, weight: float) -> float:
    """Weighted LM log-probability of ``next_token`` after ``prefix``."""
    return weight * float(lm.batch_score([prefix])[0, next_token])


def joint_beam_search(
    decoder: Optional[PrefixScorer],
    ctc_logprobs: Optional[np.ndarray],
    cfg: BeamConfig,
    sos: int,
    eos: int,
    lm: Optional[PrefixScorer] = None,
    tag_ids: Sequence[int] = (),
    blank: int = 0,
) -> List[Hypothesis]:
    """N-best list sorted by combined score (at most ``cfg.beam`` entries).

    Every non-blank, non-sos token is scored by every active scorer at each
    step, so no pre-beam pruning hides candidates from the CTC prefix scorer.
    Ties are broken by hypothesis rank, then by token id.
    """
    cfg.validate()
    w_ctc, w_lm = cfg.ctc_weight, cfg.lm_weight
    if decoder is None and w_ctc < 1.0:
        raise ValueError("an attention decoder is required unless ctc_weight == 1")
    if ctc_logprobs is None and w_ctc > 0.0:
        raise ValueError("ctc_weight > 0 needs CTC log-probabilities")
    vocab_size = decoder.vocab_size if decoder is not None else eos + 1
    if lm is not None and lm.vocab_size != vocab_size:
        raise FusionError(f"LM vocabulary size {lm.vocab_size} != decoder vocabulary size {vocab_size}")
    use_lm = lm is not None and w_lm != 0.0

    ctc = CtcPrefixScorer(ctc_logprobs, blank) if ctc_logprobs is not None else None
    max_len = cfg.max_len if cfg.max_len is not None else (ctc.n_frames if ctc is not None else 100)
    labels = np.array([i for i in range(vocab_size) if i not in (blank, eos, sos)], dtype=np.int64)
    if cfg.force_tag_first and len(tag_ids) == 0:
        raise ValueError("force_tag_first needs tag ids")

    running = [Hypothesis([sos], ctc_state=ctc.initial_state() if ctc else None)]
    finished: List[Hypothesis] = []
    for step in range(max_len + 1):
        prefixes = [h.tokens for h in running]
        att = decoder.batch_score(prefixes) if decoder is not None else np.zeros((len(running), vocab_size))
        lmp = lm.batch_score(prefixes) if use_lm else np.zeros((len(running), vocab_size))
        cands = []  # (score, hyp rank, token, att, ctc, lm, state payload)
        for rank, hyp in enumerate(running):
            allowed = labels
            if step == 0 and cfg.force_tag_first:
                allowed = np.asarray(tag_ids, dtype=np.int64)
            ctc_next = np.zeros(len(allowed))
            r_n = r_b = None
            eos_ctc = 0.0
            if ctc is not None:
                if len(allowed):
                    ctc_next, r_n, r_b = ctc.extend(hyp.ctc_state, allowed)
                eos_ctc = ctc.final_score(hyp.ctc_state)
            ids = list(allowed)
            ctc_vals = list(ctc_next)
            if not (step == 0 and cfg.force_tag_first):
                ids.append(eos)
                ctc_vals.append(eos_ctc)
            for j, (tok, c_total) in enumerate(zip(ids, ctc_vals)):
                a_total = hyp.att + float(att[rank, tok])
                l_total = hyp.lm + float(lmp[rank, tok]) if use_lm else hyp.lm
                if ctc is not None and c_total < _IMPOSSIBLE and w_ctc > 0:
                    continue
                if not np.isfinite(a_total) and w_ctc < 1:
                    continue
                n = len(hyp.tokens)
                total = (1 - w_ctc) * a_total if w_ctc < 1 else 0.0
                total += w_ctc * c_total + w_lm * l_total + cfg.length_bonus * n
                cands.append((total, rank, int(tok), a_total, float(c_total), l_total, j if tok != eos else -1, r_n, r_b))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_running: List[Hypothesis] = []
        for total, rank, tok, a_total, c_total, l_total, j, r_n, r_b in cands[: cfg.beam]:
            parent = running[rank]
            if tok == eos:
                finished.append(Hypothesis(parent.tokens + [eos], a_total, c_total, l_total, total, parent.ctc_state, True))
            else:
                state = None
                if ctc is not None:
                    state = CtcPrefixState(r_n[:, j].copy(), r_b[:, j].copy(), tok, c_total)
                new_running.append(Hypothesis(parent.tokens + [tok], a_total, c_total, l_total, total, state))
        running = new_running
        if not running or step == max_len:
            break
        if cfg.length_bonus <= 0 and len(finished) >= cfg.beam:
            kth = sorted((h.score for h in finished), reverse=True)[cfg.beam - 1]
            if running[0].score <= kth:
                break

    if not finished:
        if not running:
            return []
        best = running[0]
        best.truncated = True
        return [best]
    finished.sort(key=lambda h: (-h.score, h.tokens))
    return finished[: cfg.beam]


class StrippedHypothesis(NamedTuple):
    dialect: Optional[str]
    tokens: List[int]
    malformed: bool


def strip_tag(tokens: Sequence[int], vocab: Vocabulary) -> StrippedHypothesis:
    """Split a leading dialect tag off a hypothesis; later tags are dropped with a warning."""
    body = [t for t in tokens if t not in (vocab.sos, vocab.blank)]
    dialect = None
    if body and vocab.is_tag_id(body[0]):
        dialect = vocab.dialect_of(body[0])
        body = body[1:]
    malformed = any(vocab.is_tag_id(t) for t in body)
    if malformed:
        logger.warning("malformed hypothesis: dialect tag in non-initial position %s", vocab.decode(tokens))
        body = [t for t in body if not vocab.is_tag_id(t)]
    return StrippedHypothesis(dialect, body, malformed)
