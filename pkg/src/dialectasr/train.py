"""Training loop for the hybrid model and corpus-level decoding/evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .blocks import subsampled_length
from .corpus import ManifestRecord, read_features, spec_augment, speed_perturb
from .ctc import min_frames
from .decoding import BeamConfig, DecoderScorer, joint_beam_search, strip_tag
from .model import Batch, HybridModel, UtteranceTargets, build_targets, predict_did
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


class NoamSchedule:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""

    def __init__(self, peak_lr: float, warmup: int):
        if warmup < 1 or peak_lr <= 0:
            raise ValueError("warmup must be >= 1 and peak_lr > 0")
        self.peak_lr = peak_lr
        self.warmup = warmup

    def __call__(self, step: int) -> float:
        step = max(step, 1)
        return self.peak_lr * min(step / self.warmup, math.sqrt(self.warmup / step))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup: int = 200
    grad_clip: float = 5.0
    seed: int = 0
    speed_factors: Tuple[float, ...] = (0.9, 1.0, 1.1)
    time_masks: int = 2
    time_width: int = 5
    freq_masks: int = 1
    freq_width: int = 2
    log_every: int = 50

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tokens: List[int]
    dialect: str
    speaker: str = ""


def load_utterances(records: Sequence[ManifestRecord], root: str | Path, vocab: Vocabulary) -> List[Utterance]:
    root = Path(root)
    out = []
    for r in records:
        feats = read_features(root / r.features)
        if feats.shape[0] != r.frames:
            raise ValueError(f"{r.id}: feature file has {feats.shape[0]} frames, manifest says {r.frames}")
        out.append(Utterance(r.id, feats, vocab.encode(r.words), r.dialect, r.speaker))
    return out


def _augment(feats: np.ndarray, target_len: int, cfg: TrainConfig, rng: np.random.Generator, seed: int) -> np.ndarray:
    factor = float(cfg.speed_factors[int(rng.integers(len(cfg.speed_factors)))]) if cfg.speed_factors else 1.0
    warped = speed_perturb(feats, factor)
    # fall back to the unwarped input rather than make the CTC target infeasible
    if subsampled_length(warped.shape[0]) < target_len:
        warped = feats
    if cfg.time_masks or cfg.freq_masks:
        tw = min(cfg.time_width, warped.shape[0])
        fw = min(cfg.freq_width, warped.shape[1])
        warped = spec_augment(warped, cfg.time_masks, tw, cfg.freq_masks, fw, seed)
    return warped


@dataclass
class StepLog:
    step: int
    total: float
    asr_loss: float
    lr: float


@dataclass
class TrainResult:
    log: List[StepLog] = field(default_factory=list)
    seconds: float = 0.0

    def asr_curve(self) -> np.ndarray:
        return np.array([s.asr_loss for s in self.log])


def train_model(
    model: HybridModel,
    data: Sequence[Utterance],
    cfg: TrainConfig,
    on_step: Optional[Callable[[StepLog], None]] = None,
) -> TrainResult:
    """Seeded minibatch training; identical seeds and data give identical parameters."""
    cfg.validate()
    if not data:
        raise ValueError("empty training set")
    vocab = model.vocab
    tagged = model.cfg.tagged_targets
    targets = [build_targets(u.tokens, u.dialect, vocab, tagged) for u in data]
    need = [min_frames(t.ctc) for t in targets]
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.peak_lr, betas=(0.9, 0.98), eps=1e-9)
    sched = NoamSchedule(cfg.peak_lr, cfg.warmup)
    result = TrainResult()
    start = time.perf_counter()
    order, pos = rng.permutation(len(data)), 0
    model.train()
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(data)), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        feats = [_augment(data[i].features, need[i], cfg, rng, seed=int(rng.integers(2**31))) for i in idx]
        batch = Batch.collate(feats, [targets[i] for i in idx], [data[i].id for i in idx])
        lr = sched(step)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad()
        total, report = model.forward_train(batch)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        entry = StepLog(step, report.total, report.asr_loss(), lr)
        result.log.append(entry)
        if on_step:
            on_step(entry)
        if step % cfg.log_every == 0:
            recent = result.log[-cfg.log_every :]
            logger.info("step %d loss %.4f asr %.4f lr %.2e", step, np.mean([s.total for s in recent]),
                        np.mean([s.asr_loss for s in recent]), lr)
    model.eval()
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class DecodeRecord:
    id: str
    reference: List[str]
    dialect: str
    hypothesis: List[str]
    decoder_dialect: Optional[str]
    tap_dialect: Optional[str]
    did_note: str
    score: float
    att: float
    ctc: float
    lm: float
    truncated: bool = False

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "dialect": self.dialect,
            "reference": " ".join(self.reference),
            "text": " ".join(self.hypothesis),
            "decoder_dialect": self.decoder_dialect,
            "tap_dialect": self.tap_dialect,
            "did_note": self.did_note,
            "scores": {"total": self.score, "att": self.att, "ctc": self.ctc, "lm": self.lm},
            "truncated": self.truncated,
        }


@torch.no_grad()
def decode_utterances(model: HybridModel, data: Sequence[Utterance], beam: BeamConfig, lm=None) -> List[DecodeRecord]:
    """Joint CTC/attention beam search per utterance plus DID from the designated tap."""
    from .lm import LmScorer

    vocab = model.vocab
    model.eval()
    scorer = LmScorer(lm) if lm is not None else None
    did_layer = model.did_layer()
    out = []
    for u in data:
        enc = model.encode(torch.as_tensor(u.features)[None])
        ctc_lp = enc.ctc_logprobs[0].double().numpy()
        dec = DecoderScorer(model.decoder, enc.hidden, enc.mask)
        hyps = joint_beam_search(dec, ctc_lp, beam, vocab.sos, vocab.eos, lm=scorer, tag_ids=vocab.tag_ids)
        best = hyps[0] if hyps else None
        tokens = best.output if best else []
        stripped = strip_tag(tokens, vocab)
        decoder_tag = vocab.tag_id(stripped.dialect) if stripped.dialect else None
        tap_lp = None
        if did_layer is not None:
            tap = next(t for t in enc.taps if t.layer == did_layer)
            tap_lp = tap.logprobs["did"][0].double().numpy()
        try:
            did = predict_did(tap_lp, vocab, decoder_tag, did_layer)
            tap_dialect = did.dialect if did.source == "interctc" else None
            note = did.note
        except Exception as exc:  # no DID source at all for this utterance
            tap_dialect, note = None, str(exc)
        out.append(
            DecodeRecord(
                u.id, vocab.decode(u.tokens), u.dialect, vocab.decode(stripped.tokens), stripped.dialect,
                tap_dialect, note,
                best.score if best else float("-inf"), best.att if best else 0.0,
                best.ctc if best else 0.0, best.lm if best else 0.0, bool(best and best.truncated),
            )
        )
    return out
