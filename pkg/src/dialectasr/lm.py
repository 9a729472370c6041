"""Causal transformer LM: pretraining on plain text, fine-tuning on
dialect-tagged text, and prefix scoring for shallow fusion."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .autodiff import load_checkpoint, save_checkpoint
from .blocks import DecoderConfig, TokenStack
from .train import NoamSchedule
from .vocab import Vocabulary, is_tag

logger = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


class ContextError(ValueError):
    pass


@dataclass
class LmConfig:
    backbone: DecoderConfig = field(default_factory=DecoderConfig)
    context: int = 64
    steps: int = 400
    batch_size: int = 32
    peak_lr: float = 2e-3
    warmup: int = 50
    seed: int = 0


@dataclass
class TextCorpus:
    sentences: List[List[str]]
    tags: List[Optional[str]]  # dialect tag symbol per sentence, e.g. "[CO]"

    @classmethod
    def parse(cls, lines: Sequence[str]) -> "TextCorpus":
        sents, tags = [], []
        for line in lines:
            words = line.split()
            if not words:
                continue
            tag = words[0] if is_tag(words[0]) else None
            sents.append(words[1:] if tag else words)
            tags.append(tag)
        return cls(sents, tags)

    @classmethod
    def read(cls, path: str | Path) -> "TextCorpus":
        return cls.parse(Path(path).read_text(encoding="utf-8").splitlines())

    def lines(self) -> List[str]:
        return [" ".join(([t] if t else []) + s) for s, t in zip(self.sentences, self.tags)]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")

    def clean(self, vocab: Vocabulary) -> "TextCorpus":
        """Token-whitelist filter plus exact-sentence dedup."""
        known = set(vocab.tokens)
        seen = set()
        sents, tags = [], []
        for s, t in zip(self.sentences, self.tags):
            key = (t, tuple(s))
            if key in seen or any(w not in known or is_tag(w) for w in s):
                continue
            seen.add(key)
            sents.append(s)
            tags.append(t)
        return TextCorpus(sents, tags)


class TransformerLM(TokenStack):
    def __init__(self, vocab: Vocabulary, cfg: LmConfig):
        super().__init__(vocab.output_dim, cfg.backbone, cross=False)
        self.vocab = vocab
        self.lm_cfg = cfg

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cfg = asdict(self.lm_cfg)
        (directory / "lm_config.json").write_text(json.dumps(cfg, indent=2), encoding="utf-8")
        self.vocab.save(directory / "vocab.txt")
        save_checkpoint(self.state_dict(), directory / "lm.ictx")

    @classmethod
    def load(cls, directory: str | Path) -> "TransformerLM":
        directory = Path(directory)
        raw = json.loads((directory / "lm_config.json").read_text(encoding="utf-8"))
        cfg = LmConfig(backbone=DecoderConfig(**raw.pop("backbone")), **raw)
        lm = cls(Vocabulary.load(directory / "vocab.txt"), cfg)
        lm.load_state_dict(load_checkpoint(directory / "lm.ictx"))
        lm.eval()
        return lm


class LmScorer:
    """Batch prefix scorer used for shallow fusion."""

    def __init__(self, lm: TransformerLM):
        self.lm = lm
        self.vocab_size = lm.vocab_size

    @torch.no_grad()
    def batch_score(self, prefixes):
        for p in prefixes:
            if len(p) >= self.lm.lm_cfg.context:
                raise ContextError(f"prefix of length {len(p)} exceeds LM context {self.lm.lm_cfg.context}")
        tokens = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long)
        return self.lm(tokens)[:, -1].double().numpy()


def lm_score_prefix(lm: TransformerLM, prefix: Sequence[int]) -> np.ndarray:
    """Next-token log-probabilities after ``prefix`` (which starts with sos)."""
    return LmScorer(lm).batch_score([prefix])[0]


def encode_corpus(corpus: TextCorpus, vocab: Vocabulary, require_tags: bool | None) -> List[List[int]]:
    """sos [tag] tokens eos id sequences; ``require_tags`` True/False enforces tagging, None keeps as-is."""
    out = []
    for lineno, (words, tag) in enumerate(zip(corpus.sentences, corpus.tags), start=1):
        if require_tags and tag is None:
            raise CorpusError(f"line {lineno}: untagged sentence in a fine-tuning corpus")
        if require_tags is False and tag is not None:
            tag = None
        try:
            ids = vocab.encode(words)
        except ValueError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        if any(vocab.is_tag_id(i) for i in ids):
            raise CorpusError(f"line {lineno}: dialect tag inside sentence text")
        head = [vocab.tag_id(tag)] if tag else []
        out.append([vocab.sos] + head + ids + [vocab.eos])
    return out


def _pad(seqs: Sequence[Sequence[int]], eos: int):
    k = max(len(s) for s in seqs) - 1
    inp = torch.full((len(seqs), k), eos, dtype=torch.long)
    out = torch.full((len(seqs), k), eos, dtype=torch.long)
    mask = torch.zeros((len(seqs), k), dtype=torch.bool)
    for i, s in enumerate(seqs):
        inp[i, : len(s) - 1] = torch.as_tensor(s[:-1])
        out[i, : len(s) - 1] = torch.as_tensor(s[1:])
        mask[i, : len(s) - 1] = True
    return inp, out, mask


def sequence_nll(lm: TransformerLM, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Per-sentence summed negative log-likelihood (sos excluded, eos included)."""
    inp, out, mask = _pad(seqs, lm.vocab.eos)
    logp = lm(inp)
    nll = -logp.gather(-1, out[..., None])[..., 0]
    return (nll * mask).sum(-1)


@torch.no_grad()
def perplexity(lm: TransformerLM, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i : i + batch_size]
        total += float(sequence_nll(lm, chunk).double().sum())
        count += sum(len(s) - 1 for s in chunk)
    return math.exp(total / count)


def _fit(lm: TransformerLM, seqs: List[List[int]], cfg: LmConfig, log_every: int = 50) -> List[float]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(lm.parameters(), lr=cfg.peak_lr, betas=(0.9, 0.98), eps=1e-9)
    sched = NoamSchedule(cfg.peak_lr, cfg.warmup)
    losses = []
    lm.train()
    order = rng.permutation(len(seqs))
    pos = 0
    for step in range(1, cfg.steps + 1):
        if pos + cfg.batch_size > len(order):
            order, pos = rng.permutation(len(seqs)), 0
        batch = [seqs[i] for i in order[pos : pos + cfg.batch_size]]
        pos += cfg.batch_size
        for g in opt.param_groups:
            g["lr"] = sched(step)
        opt.zero_grad()
        nll = sequence_nll(lm, batch)
        loss = nll.sum() / sum(len(s) - 1 for s in batch)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(lm.parameters(), 5.0)
        opt.step()
        losses.append(loss.item())
        if step % log_every == 0:
            logger.info("lm step %d loss %.4f", step, float(np.mean(losses[-log_every:])))
    lm.eval()
    return losses


def train_lm(corpus: TextCorpus, vocab: Vocabulary, cfg: LmConfig | None = None) -> TransformerLM:
    """Stage 1: plain text; tag rows exist in the embedding table but stay unseen."""
    cfg = cfg or LmConfig()
    if not corpus.sentences:
        raise CorpusError("empty training corpus")
    seqs = encode_corpus(corpus, vocab, require_tags=False)
    torch.manual_seed(cfg.seed)
    lm = TransformerLM(vocab, cfg)
    _fit(lm, seqs, cfg)
    return lm


def finetune_lm(lm: TransformerLM, corpus: TextCorpus, cfg: LmConfig | None = None) -> TransformerLM:
    """Stage 2: continue training on tag-prepended sentences (same shapes, same vocabulary)."""
    cfg = cfg or lm.lm_cfg
    if not corpus.sentences:
        raise CorpusError("empty fine-tuning corpus")
    if not lm.vocab.tag_ids:
        raise CorpusError("LM vocabulary has no dialect tags")
    seqs = encode_corpus(corpus, lm.vocab, require_tags=True)
    _fit(lm, seqs, cfg)
    return lm
