"""CTC segmentation: align a long feature stream to known utterance texts.

The trellis runs over the blank-expanded token sequence (blank, t1, blank,
t2, ..., blank) with the usual CTC moves: stay, advance by one, or skip a
blank between two different tokens.  Row 0 is the empty prefix before any
frame is consumed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .blocks import subsampled_length
from .ctc import BLANK, min_frames

logger = logging.getLogger(__name__)


class AlignmentInfeasibleError(ValueError):
    pass


@dataclass
class Trellis:
    scores: np.ndarray  # (N + 1, S) best log-score of being in state s after t frames
    backptr: np.ndarray  # (N + 1, S) int8: 0 stay, 1 advance, 2 skip
    ext: np.ndarray  # (S,) expanded label per state, 0 = blank
    token_lp: np.ndarray  # (N, S) emission log-prob per frame and state

    @property
    def n_frames(self) -> int:
        return self.scores.shape[0] - 1

    @property
    def n_tokens(self) -> int:
        return (len(self.ext) - 1) // 2


@dataclass
class SegmentResult:
    id: str
    start_frame: int
    end_frame: int
    confidence: float
    text: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class Alignment:
    token_frames: List[int]  # frame where the path enters each token
    token_last: List[int]  # last frame spent in each token
    score: float
    last_token_frame: int


def _blank_emission(logprobs: np.ndarray, filler_ids: Sequence[int]) -> np.ndarray:
    ids = sorted({BLANK, *filler_ids})
    return np.logaddexp.reduce(logprobs[:, ids], axis=1) if len(ids) > 1 else logprobs[:, BLANK]


def build_trellis(logprobs, tokens: Sequence[int], filler_ids: Sequence[int] = ()) -> Trellis:
    """Viterbi trellis of ``tokens`` over ``logprobs`` (N, C).

    ``filler_ids`` are labels that count as blank on blank states (used for
    dialect tags the text does not mention).
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    n = lp.shape[0]
    tokens = [int(t) for t in tokens]
    if any(t == BLANK for t in tokens):
        raise ValueError("blank cannot appear in an alignment text")
    if min_frames(tokens) > n:
        raise AlignmentInfeasibleError(f"{len(tokens)} tokens need {min_frames(tokens)} frames, stream has {n}")
    s_len = 2 * len(tokens) + 1
    ext = np.zeros(s_len, dtype=np.int64)
    ext[1::2] = tokens
    skip = np.zeros(s_len, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]
    emit[:, 0::2] = _blank_emission(lp, filler_ids)[:, None]

    scores = np.full((n + 1, s_len), -np.inf)
    back = np.zeros((n + 1, s_len), dtype=np.int8)
    scores[0, 0] = 0.0
    for t in range(n):
        prev = scores[t]
        stay = prev
        adv = np.concatenate([[-np.inf], prev[:-1]])
        skp = np.where(skip, np.concatenate([[-np.inf, -np.inf], prev[:-2]]), -np.inf)
        cand = np.stack([stay, adv, skp])
        choice = np.argmax(cand, axis=0)  # first maximum: stay beats advance beats skip
        scores[t + 1] = cand[choice, np.arange(s_len)] + emit[t]
        back[t + 1] = choice
    return Trellis(scores, back, ext, emit)


def backtrack(trellis: Trellis) -> Alignment:
    """Best path ending in the last token at its most probable frame, then blanks."""
    n, s_len = trellis.n_frames, len(trellis.ext)
    blank_lp = trellis.token_lp[:, 0]
    if s_len == 1:
        return Alignment([], [], float(trellis.scores[n, 0]), -1)
    # log-prob that frames t..N-1 are all blank, for t = 0..N
    tail = np.concatenate([np.cumsum(blank_lp[::-1])[::-1], [0.0]])
    last = s_len - 2
    end_scores = trellis.scores[1:, last] + tail[1:]
    t_end = int(np.argmax(end_scores)) + 1  # earliest frame on ties
    best = float(end_scores[t_end - 1])
    if not np.isfinite(best):
        raise AlignmentInfeasibleError("no path with finite score")
    states = np.empty(t_end + 1, dtype=np.int64)
    s = last
    for t in range(t_end, 0, -1):
        states[t] = s
        s -= int(trellis.backptr[t, s])
    states[0] = s
    entry: List[int] = []
    final: List[int] = []
    for t in range(1, t_end + 1):
        st = states[t]
        if st % 2 == 1:
            k = st // 2
            if len(entry) <= k:
                entry.append(t - 1)
                final.append(t - 1)
            else:
                final[k] = t - 1
    return Alignment(entry, final, best, t_end - 1)


def window_confidence(token_lps: Sequence[float], window: int = 3) -> float:
    """exp of the minimum, over sliding windows of ``window`` tokens, of the mean log-prob."""
    x = np.asarray(token_lps, dtype=np.float64)
    if len(x) == 0:
        return 0.0
    w = min(window, len(x))
    means = np.convolve(x, np.ones(w) / w, mode="valid")
    return float(np.exp(means.min()))


def confidence(logprobs, tokens: Sequence[int], token_frames: Sequence[int], window: int = 3) -> float:
    """Per-utterance alignment confidence in [0, 1] from the aligned per-token probabilities."""
    lp = np.asarray(logprobs, dtype=np.float64)
    return window_confidence([lp[f, t] for f, t in zip(token_frames, tokens)], window)


@torch.no_grad()
def direct_infer(model, features) -> np.ndarray:
    x = torch.as_tensor(np.asarray(features, dtype=np.float32))[None]
    return model.encode(x).ctc_logprobs[0].double().numpy()


@torch.no_grad()
def partition_infer(model, features, max_frames: int = 6000, overlap_frames: int = 10) -> np.ndarray:
    """Final-CTC log-posteriors of a long stream computed chunk by chunk.

    Sizes are in encoder (post-subsampling) frames; each chunk covers four
    times as many input frames.  At every join half of the overlap is taken
    from each neighbour and the rest discarded.
    """
    if overlap_frames < 0 or 2 * overlap_frames >= max_frames:
        raise ValueError("overlap_frames must be < max_frames / 2")
    feats = np.asarray(features, dtype=np.float32)
    total = subsampled_length(feats.shape[0])
    if total <= max_frames:
        return direct_infer(model, feats)
    starts = chunk_starts(total, max_frames, overlap_frames)
    joins = join_frames(total, max_frames, overlap_frames)
    parts = []
    for i, s in enumerate(starts):
        e = min(s + max_frames, total)
        lp = direct_infer(model, feats[4 * s : 4 * e])
        keep_lo = joins[i - 1] if i > 0 else 0
        keep_hi = joins[i] if i < len(joins) else total
        parts.append(lp[keep_lo - s : keep_hi - s])
    out = np.concatenate(parts)
    assert out.shape[0] == total, (out.shape, total)
    return out


def chunk_starts(total: int, max_frames: int, overlap_frames: int) -> List[int]:
    """Chunk start frames; the last chunk is pulled back to end exactly at ``total``."""
    starts = [0]
    while starts[-1] + max_frames < total:
        starts.append(min(starts[-1] + max_frames - overlap_frames, total - max_frames))
    return starts


def join_frames(total: int, max_frames: int = 6000, overlap_frames: int = 10) -> List[int]:
    """Frames where partitioned output switches from one chunk to the next (mid-overlap)."""
    starts = chunk_starts(total, max_frames, overlap_frames)
    return [(b + min(a + max_frames, total)) // 2 for a, b in zip(starts, starts[1:])]


@dataclass
class StreamAlignment:
    segments: List[SegmentResult]  # every utterance, unfiltered
    boundaries: List[int]  # U + 1 boundaries (leading edge, joins, trailing edge)
    alignment: Alignment


def align_stream(logprobs, texts: Sequence[Sequence[int]], ids: Sequence[str], words: Sequence[str],
                 filler_ids: Sequence[int] = (), window: int = 3) -> StreamAlignment:
    """Segment a posterior stream into the given utterances.

    Boundaries sit at the midpoint of the blank run between one utterance's
    last aligned token and the next one's first; the outer boundaries at the
    midpoints of the leading and trailing blank runs.
    """
    if not texts or any(len(t) == 0 for t in texts):
        raise ValueError("every utterance text must be nonempty")
    lp = np.asarray(logprobs, dtype=np.float64)
    tokens = [t for text in texts for t in text]
    trellis = build_trellis(lp, tokens, filler_ids)
    ali = backtrack(trellis)
    n = lp.shape[0]
    offsets = np.cumsum([0] + [len(t) for t in texts])
    first = [ali.token_frames[o] for o in offsets[:-1]]
    last = [ali.token_last[o - 1] for o in offsets[1:]]
    edges = [0] + [x for pair in zip(first, [v + 1 for v in last]) for x in pair] + [n]
    bounds = [int((edges[2 * i] + edges[2 * i + 1]) // 2) for i in range(len(texts) + 1)]
    segs = []
    for u, (text, uid, w) in enumerate(zip(texts, ids, words)):
        frames = ali.token_frames[offsets[u] : offsets[u + 1]]
        conf = confidence(lp, text, frames, window)
        start, end = bounds[u], max(bounds[u + 1], bounds[u] + 1)
        segs.append(SegmentResult(uid, start, min(end, n), conf, w))
    return StreamAlignment(segs, bounds, ali)


def align_corpus(model, features, texts: Sequence[Sequence[str]], ids: Optional[Sequence[str]] = None,
                 threshold: float = 0.0, window: int = 3, max_frames: int = 6000, overlap_frames: int = 10) -> List[SegmentResult]:
    """Partitioned inference, trellis, backtrack and confidence; keeps segments scoring >= ``threshold``.

    Texts are word lists; a leading "[XX]" tag is aligned like any token, and
    texts without one let tag emissions pass as blank.
    """
    if not texts:
        raise ValueError("no texts to align")
    vocab = model.vocab
    ids = list(ids) if ids is not None else [f"utt{i:04d}" for i in range(len(texts))]
    encoded = [vocab.encode(t) for t in texts]
    untagged = any(not (e and vocab.is_tag_id(e[0])) for e in encoded)
    fillers = vocab.tag_ids if untagged else []
    lp = partition_infer(model, features, max_frames, overlap_frames)
    result = align_stream(lp, encoded, ids, [" ".join(t) for t in texts], fillers, window)
    kept = [s for s in result.segments if s.confidence >= threshold]
    dropped = len(result.segments) - len(kept)
    if dropped:
        logger.info("dropped %d of %d segments below confidence %.3f", dropped, len(result.segments), threshold)
    return kept


def write_segments(path: str | Path, segments: Sequence[SegmentResult]) -> None:
    Path(path).write_text("".join(s.to_json() + "\n" for s in segments), encoding="utf-8")
