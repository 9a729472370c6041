"""Word error rate, dialect-ID accuracy and the evaluation report."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .vocab import DIALECTS, is_tag


class MetricError(ValueError):
    pass


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _words(tokens: Sequence[str]) -> List[str]:
    # dialect tags are never words
    return [t for t in tokens if not is_tag(t)]


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> float:
    ref = _words(reference)
    if not ref:
        raise MetricError("empty reference")
    return edit_distance(ref, _words(hypothesis)) / len(ref)


def corpus_wer(references: Sequence[Sequence[str]], hypotheses: Sequence[Sequence[str]]) -> float:
    """Pooled edits over pooled reference length."""
    if len(references) != len(hypotheses):
        raise MetricError("reference/hypothesis count mismatch")
    errs = sum(edit_distance(_words(r), _words(h)) for r, h in zip(references, hypotheses))
    n = sum(len(_words(r)) for r in references)
    if n == 0:
        raise MetricError("empty reference")
    return errs / n


def did_accuracy(labels: Sequence[str], predictions: Sequence[Optional[str]]) -> float:
    if len(labels) != len(predictions):
        raise MetricError(f"length mismatch: {len(labels)} labels vs {len(predictions)} predictions")
    if not labels:
        raise MetricError("no labels")
    return sum(a == b for a, b in zip(labels, predictions)) / len(labels)


@dataclass
class EvalReport:
    wer: float
    wer_by_dialect: Dict[str, float]
    did_tap: Optional[float]
    did_decoder: float
    edits: int
    ref_words: int
    utterances: List[dict] = field(default_factory=list)

    @property
    def did(self) -> float:
        """Headline DID accuracy: tap-based when a DID tap exists, else decoder tag."""
        return self.did_tap if self.did_tap is not None else self.did_decoder

    def summary(self) -> dict:
        return {
            "wer": self.wer,
            "wer_by_dialect": self.wer_by_dialect,
            "did": self.did,
            "did_tap": self.did_tap,
            "did_decoder": self.did_decoder,
            "edits": self.edits,
            "ref_words": self.ref_words,
        }


def evaluate_records(records: Sequence[dict]) -> EvalReport:
    """Report from decode records holding ``reference``, ``text``, ``dialect``,
    ``decoder_dialect`` and optionally ``tap_dialect`` (space-joined token strings)."""
    if not records:
        raise MetricError("no decode records")
    per_utt = []
    edits: Dict[str, int] = {}
    words: Dict[str, int] = {}
    for rec in records:
        ref, hyp = _words(rec["reference"].split()), _words(rec["text"].split())
        e = edit_distance(ref, hyp)
        d = rec["dialect"]
        edits[d] = edits.get(d, 0) + e
        words[d] = words.get(d, 0) + len(ref)
        per_utt.append({"id": rec["id"], "dialect": d, "edits": e, "ref_words": len(ref)})
    total_e, total_n = sum(edits.values()), sum(words.values())
    if total_n == 0:
        raise MetricError("empty reference")
    labels = [r["dialect"] for r in records]
    has_tap = any(r.get("tap_dialect") is not None for r in records)
    return EvalReport(
        wer=total_e / total_n,
        wer_by_dialect={d: edits[d] / words[d] for d in DIALECTS if words.get(d)},
        did_tap=did_accuracy(labels, [r.get("tap_dialect") for r in records]) if has_tap else None,
        did_decoder=did_accuracy(labels, [r.get("decoder_dialect") for r in records]),
        edits=total_e,
        ref_words=total_n,
        utterances=per_utt,
    )
