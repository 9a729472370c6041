"""CTC loss by log-space forward-backward, a brute-force oracle, greedy
decoding and incremental prefix scoring for joint beam search.

Column 0 of every log-posterior matrix is the blank symbol.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

BLANK = 0
# Stand-in for log(0).  logaddexp of two sentinels stays ~-1e30 and exp()
# underflows to exactly 0, so no inf - inf = nan can appear.
NEG_INF = -1e30


class CtcInfeasibleError(ValueError):
    """The target cannot be emitted in the available number of frames."""


class OracleBoundError(ValueError):
    pass


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames able to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_feasible(n_frames: int, target: Sequence[int], utt: str | int | None = None) -> None:
    need = min_frames(target)
    if need > n_frames:
        who = f" (utterance {utt})" if utt is not None else ""
        raise CtcInfeasibleError(f"target of {len(target)} labels needs {need} frames, only {n_frames} available{who}")


def _expand(targets: Sequence[Sequence[int]]):
    smax = 2 * max((len(t) for t in targets), default=0) + 1
    ext = np.zeros((len(targets), smax), dtype=np.int64)
    skip = np.zeros((len(targets), smax), dtype=bool)
    slen = np.zeros(len(targets), dtype=np.int64)
    for b, t in enumerate(targets):
        ext[b, 1 : 2 * len(t) : 2] = t
        slen[b] = 2 * len(t) + 1
        for s in range(3, 2 * len(t), 2):
            skip[b, s] = ext[b, s] != ext[b, s - 2]
    return ext, skip, slen


def _shift_right(x, k):
    return np.concatenate([np.full((x.shape[0], k), NEG_INF), x], axis=1)[:, : x.shape[1]]


def _shift_left(x, k):
    return np.concatenate([x, np.full((x.shape[0], k), NEG_INF)], axis=1)[:, k:]


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def ctc_forward_backward(logprobs: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]]):
    """Batched CTC negative log-likelihoods and their gradient w.r.t. ``logprobs``.

    ``logprobs`` is (B, N, C) float64.  The gradient treats every entry as an
    independent input, i.e. it is minus the per-frame label occupancy.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    B, N, _ = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for b, t in enumerate(targets):
        check_feasible(int(lengths[b]), t, b)
    ext, skip, slen = _expand(targets)
    S = ext.shape[1]
    bidx = np.arange(B)[:, None]
    emit = lp[bidx[:, :, None], np.arange(N)[None, :, None], ext[:, None, :]]  # (B, N, S)
    valid_s = np.arange(S)[None, :] < slen[:, None]
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((B, N, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(slen > 1, emit[:, 0, 1], NEG_INF)
    for t in range(1, N):
        prev = alpha[:, t - 1]
        one = _shift_right(prev, 1)
        two = np.where(skip, _shift_right(prev, 2), NEG_INF)
        alpha[:, t] = _lse3(prev, one, two) + emit[:, t]

    last = lengths - 1
    a_last = alpha[np.arange(B), last]  # (B, S)
    end1 = a_last[np.arange(B), slen - 1]
    end2 = np.where(slen > 1, a_last[np.arange(B), np.maximum(slen - 2, 0)], NEG_INF)
    log_z = np.logaddexp(end1, end2)

    # beta includes the emission at its own frame
    beta = np.full((B, N, S), NEG_INF)
    skip_next = np.concatenate([skip, np.zeros((B, 2), dtype=bool)], axis=1)[:, 2:]
    s_idx = np.arange(S)[None, :]
    init = np.where((s_idx == slen[:, None] - 1) | (s_idx == slen[:, None] - 2), 0.0, NEG_INF)
    for t in range(N - 1, -1, -1):
        if t < N - 1:
            nxt = beta[:, t + 1]
            one = _shift_left(nxt, 1)
            two = np.where(skip_next, _shift_left(nxt, 2), NEG_INF)
            rec = _lse3(nxt, one, two)
        else:
            rec = np.full((B, S), NEG_INF)
        rec = np.where((t == last)[:, None], init, rec)
        rec = np.where((t > last)[:, None], NEG_INF, rec + emit[:, t])
        beta[:, t] = np.where((t > last)[:, None], NEG_INF, rec)

    occ = np.exp(alpha + beta - emit - log_z[:, None, None])
    occ = np.where(valid_s[:, None, :], occ, 0.0)
    grad = np.zeros_like(lp)
    b_all = np.arange(B)
    for s in range(S):
        grad[b_all, :, ext[:, s]] -= occ[:, :, s]
    return -log_z, grad


class _CtcLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logprobs, lengths, targets):
        loss, grad = ctc_forward_backward(logprobs.detach().cpu().double().numpy(), lengths, targets)
        ctx.save_for_backward(torch.from_numpy(grad).to(logprobs.dtype))
        return torch.from_numpy(loss).to(logprobs.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out[:, None, None], None, None


def ctc_loss_batch(logprobs: torch.Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Per-utterance CTC losses, shape (B,), differentiable w.r.t. ``logprobs`` (B, N, C)."""
    lengths = [int(n) for n in lengths]
    targets = [list(map(int, t)) for t in targets]
    return _CtcLoss.apply(logprobs, lengths, targets)


def ctc_loss(logprobs, target: Sequence[int]) -> torch.Tensor:
    """-log P(target | logprobs) for one utterance; ``logprobs`` is (N, C)."""
    lp = torch.as_tensor(logprobs)
    if not torch.is_floating_point(lp):
        lp = lp.double()
    return ctc_loss_batch(lp.unsqueeze(0), [lp.shape[0]], [target])[0]


def collapse(path: Sequence[int], blank: int = BLANK) -> List[int]:
    out: List[int] = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(int(p))
        prev = p
    return out


def ctc_loss_bruteforce(logprobs, target: Sequence[int]) -> float:
    """Enumerate all C**N frame paths; returns +inf when none collapses to ``target``."""
    lp = np.asarray(logprobs, dtype=np.float64)
    n, c = lp.shape
    if n > 8 or c > 5:
        raise OracleBoundError(f"brute force limited to N<=8, C<=5 (got N={n}, C={c})")
    target = list(target)
    scores = [
        lp[np.arange(n), path].sum()
        for path in itertools.product(range(c), repeat=n)
        if collapse(path) == target
    ]
    if not scores:
        return float("inf")
    return -float(np.logaddexp.reduce(scores))


def ctc_greedy_decode(logprobs, blank: int = BLANK) -> List[int]:
    # np.argmax returns the first maximum: ties go to the lowest id
    return collapse(np.argmax(np.asarray(logprobs), axis=-1).tolist(), blank)


@dataclass
class CtcPrefixState:
    """Per-frame log-probabilities of the prefix ending in a label (``r_n``)
    or in blank (``r_b``), plus the prefix log-probability ``log_psi``."""

    r_n: np.ndarray
    r_b: np.ndarray
    last: int | None
    log_psi: float = 0.0


class CtcPrefixScorer:
    """Prefix probabilities P(prefix... | X) over one utterance's posteriors."""

    def __init__(self, logprobs, blank: int = BLANK):
        self.lp = np.asarray(logprobs, dtype=np.float64)
        self.blank = blank
        self.n_frames = self.lp.shape[0]

    def initial_state(self) -> CtcPrefixState:
        r_b = np.cumsum(self.lp[:, self.blank])
        return CtcPrefixState(np.full(self.n_frames, NEG_INF), r_b, None, 0.0)

    def extend(self, state: CtcPrefixState, tokens: Sequence[int]):
        """Prefix log-probabilities for every candidate in ``tokens``.

        Returns ``(log_psi, r_n, r_b)`` with shapes (K,), (N, K), (N, K).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if np.any(tokens == self.blank):
            raise ValueError("blank is not a label and cannot extend a prefix")
        n, k = self.n_frames, len(tokens)
        x = self.lp[:, tokens]  # (N, K)
        both = np.logaddexp(state.r_n, state.r_b)
        phi = np.repeat(both[:, None], k, axis=1)
        if state.last is not None:
            same = tokens == state.last
            phi[:, same] = state.r_b[:, None]
        r_n = np.full((n, k), NEG_INF)
        r_b = np.full((n, k), NEG_INF)
        if state.last is None:
            r_n[0] = x[0]
        psi_terms = np.full((n, k), NEG_INF)
        psi_terms[0] = r_n[0]
        blank_lp = self.lp[:, self.blank]
        for t in range(1, n):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x[t]
            r_b[t] = np.logaddexp(r_n[t - 1], r_b[t - 1]) + blank_lp[t]
            psi_terms[t] = phi[t - 1] + x[t]
        log_psi = np.logaddexp.reduce(psi_terms, axis=0)
        return log_psi, r_n, r_b

    def score(self, state: CtcPrefixState, token: int):
        log_psi, r_n, r_b = self.extend(state, [token])
        new = CtcPrefixState(r_n[:, 0].copy(), r_b[:, 0].copy(), int(token), float(log_psi[0]))
        return new, new.log_psi - state.log_psi

    def final_score(self, state: CtcPrefixState) -> float:
        """log P(sequence == prefix | X): every frame is consumed."""
        return float(np.logaddexp(state.r_n[-1], state.r_b[-1]))


def ctc_prefix_score(state: CtcPrefixState | None, next_token: int, logprobs):
    """One prefix extension; ``state=None`` starts from the empty prefix.

    Returns ``(new_state, incremental log-score)``.
    """
    scorer = CtcPrefixScorer(logprobs)
    if state is None:
        state = scorer.initial_state()
    return scorer.score(state, next_token)
