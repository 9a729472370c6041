"""Deterministic synthetic multi-dialect speech corpus, feature files and
the two training-time augmentations (speed perturbation, SpecAugment).

Each utterance is a bigram-sampled token sequence, optionally rewritten with
dialect-specific word variants, rendered as blocks of frames around fixed
token prototypes plus speaker offset, dialect offset and Gaussian noise.
"""
from __future__ import annotations

import json
import struct
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .vocab import DIALECTS

FEAT_MAGIC = b"FEAT1"


class SynthConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    speakers_per_dialect: int = 10
    utterances_per_speaker: int = 200
    vocab_size: int = 50
    feat_dim: int = 16
    frames_per_token: int = 10
    noise: float = 0.3
    speaker_scale: float = 0.2  # per-dimension std of speaker offsets
    dialect_scale: float = 1.5  # norm of each dialect's offset vector
    duration_spread: float = 0.08  # dialect duration multipliers are 1 - s, 1, 1 + s
    p_lex: float = 0.5
    n_concepts: int = 3
    min_tokens: int = 3
    max_tokens: int = 8
    silence_frames: int = 4

    def validate(self) -> None:
        for name in ("speakers_per_dialect", "utterances_per_speaker", "vocab_size", "feat_dim", "frames_per_token", "min_tokens"):
            if getattr(self, name) <= 0:
                raise SynthConfigError(f"{name} must be positive")
        if self.max_tokens < self.min_tokens:
            raise SynthConfigError("max_tokens < min_tokens")
        if not 0.0 <= self.p_lex <= 1.0:
            raise SynthConfigError("p_lex must lie in [0, 1]")
        n_variants = self.n_concepts * len(DIALECTS)
        if self.vocab_size < n_variants + self.n_concepts + 3:
            raise SynthConfigError(
                f"vocab_size {self.vocab_size} too small for {self.n_concepts} concepts x {len(DIALECTS)} dialect variants"
            )

    @classmethod
    def no_dialect_cues(cls, **kw) -> "SynthConfig":
        """Dialects differ only by label: no lexical variants, no acoustic or duration offsets."""
        kw = {"p_lex": 0.0, "dialect_scale": 0.0, "speaker_scale": 0.0, "duration_spread": 0.0, **kw}
        return cls(**kw)


@dataclass
class DialectSpec:
    dialect: str
    substitutions: Dict[str, str]
    offset: np.ndarray
    duration: float = 1.0

    def apply_lexical(self, words: Sequence[str], p_lex: float, rng: np.random.Generator) -> List[str]:
        return [self.substitutions[w] if w in self.substitutions and rng.random() < p_lex else w for w in words]


@dataclass
class ManifestRecord:
    id: str
    speaker: str
    dialect: str
    text: str
    features: str
    frames: int

    @property
    def words(self) -> List[str]:
        return self.text.split()


def token_names(vocab_size: int) -> List[str]:
    return [f"w{i:02d}" for i in range(vocab_size)]


class Generator:
    """All random structure of a synthetic corpus, derived from ``cfg.seed``."""

    def __init__(self, cfg: SynthConfig, specs: Optional[Sequence[DialectSpec]] = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        self.words = token_names(cfg.vocab_size)
        n_var = cfg.n_concepts * len(DIALECTS)
        self.variants = self.words[-n_var:]
        self.common = self.words[:-n_var]
        self.prototypes = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.feat_dim))
        k = len(self.common)
        self.start = rng.dirichlet(np.ones(k))
        self.trans = rng.dirichlet(np.full(k, 0.3), size=k)
        self.specs = list(specs) if specs is not None else self._default_specs(rng)
        self._spk_cache: Dict[Tuple[str, int], np.ndarray] = {}

    def _default_specs(self, rng: np.random.Generator) -> List[DialectSpec]:
        cfg = self.cfg
        concepts = self.common[: cfg.n_concepts]
        specs = []
        for d, dialect in enumerate(DIALECTS):
            subs = {c: self.variants[d * cfg.n_concepts + i] for i, c in enumerate(concepts)}
            direction = rng.normal(size=cfg.feat_dim)
            offset = cfg.dialect_scale * direction / np.linalg.norm(direction)
            duration = 1.0 + cfg.duration_spread * (d - 1)
            specs.append(DialectSpec(dialect, subs, offset, duration))
        return specs

    def spec(self, dialect: str) -> DialectSpec:
        for s in self.specs:
            if s.dialect == dialect:
                return s
        raise SynthConfigError(f"no dialect spec for {dialect!r}")

    def speaker_offset(self, dialect: str, speaker: int, stream: int = 0) -> np.ndarray:
        key = (dialect, speaker + 100000 * stream)
        if key not in self._spk_cache:
            rng = np.random.default_rng([self.cfg.seed, 1, DIALECTS.index(dialect), speaker, stream])
            self._spk_cache[key] = rng.normal(0.0, self.cfg.speaker_scale, size=self.cfg.feat_dim)
        return self._spk_cache[key]

    def sample_text(self, rng: np.random.Generator) -> List[str]:
        n = int(rng.integers(self.cfg.min_tokens, self.cfg.max_tokens + 1))
        idx = [int(rng.choice(len(self.common), p=self.start))]
        for _ in range(n - 1):
            idx.append(int(rng.choice(len(self.common), p=self.trans[idx[-1]])))
        return [self.common[i] for i in idx]

    def dialect_text(self, dialect: str, rng: np.random.Generator) -> List[str]:
        return self.spec(dialect).apply_lexical(self.sample_text(rng), self.cfg.p_lex, rng)

    def render(self, words: Sequence[str], dialect: str, speaker_offset: np.ndarray, rng: np.random.Generator,
               lead: int | None = None, trail: int | None = None):
        """Features (T, F) and per-token [start, end) frame spans."""
        cfg = self.cfg
        spec = self.spec(dialect)
        lead = cfg.silence_frames if lead is None else lead
        trail = cfg.silence_frames if trail is None else trail
        protos = [np.zeros(cfg.feat_dim)] * lead
        spans = []
        for w in words:
            n = max(2, int(round(cfg.frames_per_token * spec.duration * rng.uniform(0.8, 1.2))))
            spans.append((len(protos), len(protos) + n))
            protos.extend([self.prototypes[self.words.index(w)]] * n)
        protos.extend([np.zeros(cfg.feat_dim)] * trail)
        base = np.asarray(protos)
        feats = base + speaker_offset + spec.offset + rng.normal(0.0, cfg.noise, size=base.shape)
        return feats.astype(np.float32), spans

    def utterance(self, dialect: str, speaker: int, index: int):
        rng = np.random.default_rng([self.cfg.seed, 2, DIALECTS.index(dialect), speaker, index])
        words = self.dialect_text(dialect, rng)
        feats, _ = self.render(words, dialect, self.speaker_offset(dialect, speaker), rng)
        return words, feats


def write_features(path: str | Path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<qq", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != FEAT_MAGIC:
        raise ValueError(f"{path}: not a FEAT1 feature file")
    frames, dim = struct.unpack_from("<qq", data, 5)
    return np.frombuffer(data, dtype="<f4", count=frames * dim, offset=21).reshape(frames, dim).copy()


def write_manifest(path: str | Path, records: Sequence[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> List[ManifestRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ManifestRecord(**json.loads(line)) for line in fh if line.strip()]


def generate_corpus(cfg: SynthConfig, out_dir: str | Path, specs: Optional[Sequence[DialectSpec]] = None) -> List[ManifestRecord]:
    """Write ``feats/*.feat`` and ``manifest.jsonl`` under ``out_dir``; returns the records."""
    gen = Generator(cfg, specs)
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    records = []
    for dialect in DIALECTS:
        for spk in range(cfg.speakers_per_dialect):
            for u in range(cfg.utterances_per_speaker):
                words, feats = gen.utterance(dialect, spk, u)
                uid = f"{dialect}-s{spk:03d}-u{u:04d}"
                rel = f"feats/{uid}.feat"
                write_features(out_dir / rel, feats)
                records.append(ManifestRecord(uid, f"{dialect}-s{spk:03d}", dialect, " ".join(words), rel, len(feats)))
    records.sort(key=lambda r: r.id)
    write_manifest(out_dir / "manifest.jsonl", records)
    (out_dir / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2), encoding="utf-8")
    return records


def split_sets(records: Sequence[ManifestRecord], ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Speaker- and text-disjoint train/valid/test split.

    Speakers are assigned per dialect in the given ratios.  A text that ends up
    in more than one set is kept only where it occurs most often (train wins
    ties) and dropped elsewhere.
    """
    by_dialect: Dict[str, List[str]] = defaultdict(list)
    texts: Dict[str, set] = defaultdict(set)
    for r in records:
        if r.speaker not in by_dialect[r.dialect]:
            by_dialect[r.dialect].append(r.speaker)
        texts[r.dialect].add(r.text)
    assignment = {}
    rng = np.random.default_rng(seed)
    for dialect in sorted(by_dialect):
        speakers = sorted(by_dialect[dialect])
        if len(speakers) < 3:
            raise SplitError(f"speakers: dialect {dialect} has {len(speakers)} speakers, need >= 3")
        if len(texts[dialect]) < 3:
            raise SplitError(f"texts: dialect {dialect} has {len(texts[dialect])} distinct texts, need >= 3")
        speakers = [speakers[i] for i in rng.permutation(len(speakers))]
        n_valid = max(1, int(round(len(speakers) * ratios[1])))
        n_test = max(1, int(round(len(speakers) * ratios[2])))
        for i, spk in enumerate(speakers):
            assignment[spk] = "valid" if i < n_valid else "test" if i < n_valid + n_test else "train"
    counts: Dict[str, Counter] = defaultdict(Counter)
    for r in records:
        counts[r.text][assignment[r.speaker]] += 1
    order = {"train": 0, "valid": 1, "test": 2}
    home = {t: max(c, key=lambda s: (c[s], -order[s])) for t, c in counts.items()}
    out = {"train": [], "valid": [], "test": []}
    for r in records:
        part = assignment[r.speaker]
        if home[r.text] == part:
            out[part].append(r)
    return out["train"], out["valid"], out["test"]


def speed_perturb(features: np.ndarray, factor: float) -> np.ndarray:
    """Resample the time axis to round(T / factor) frames by linear interpolation."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    if factor == 1.0:
        return features.copy()
    t = features.shape[0]
    new_t = max(1, int(round(t / factor)))
    pos = np.minimum(np.arange(new_t) * factor, t - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    frac = (pos - lo)[:, None]
    return ((1 - frac) * features[lo] + frac * features[hi]).astype(features.dtype)


def spec_augment(features: np.ndarray, time_masks: int = 2, time_width: int = 5, freq_masks: int = 1,
                 freq_width: int = 2, seed: int = 0) -> np.ndarray:
    """Replace ``time_masks`` runs of ``time_width`` frames and ``freq_masks`` bands of
    ``freq_width`` channels with the utterance mean."""
    t, f = features.shape
    if time_width > t or freq_width > f:
        raise ValueError("mask width exceeds feature dimensions")
    out = features.copy()
    if time_masks == 0 and freq_masks == 0:
        return out
    rng = np.random.default_rng(seed)
    mean = features.mean(axis=0)
    for _ in range(time_masks):
        s = int(rng.integers(0, t - time_width + 1))
        out[s : s + time_width] = mean
    for _ in range(freq_masks):
        s = int(rng.integers(0, f - freq_width + 1))
        out[:, s : s + freq_width] = mean[s : s + freq_width]
    return out


@dataclass
class Stream:
    features: np.ndarray
    words: List[List[str]]
    dialects: List[str]
    boundaries: List[int]  # U + 1 boundaries in post-subsampling frames


def generate_streams(cfg: SynthConfig, n_streams: int, utts_per_stream: int = 10, gap_frames: Tuple[int, int] = (8, 24),
                     seed: int = 0, subsampling: int = 4, specs: Optional[Sequence[DialectSpec]] = None) -> List[Stream]:
    """Long recordings of concatenated utterances separated by silence.

    True boundaries are the midpoints of the silence between consecutive
    utterances' speech (and of the leading/trailing silence), in encoder frames.
    """
    gen = Generator(cfg, specs)
    streams = []
    for s in range(n_streams):
        rng = np.random.default_rng([cfg.seed, 3, seed, s])
        pieces, words_all, dialects, speech = [], [], [], []
        pos = 0
        for u in range(utts_per_stream):
            dialect = DIALECTS[int(rng.integers(len(DIALECTS)))]
            words = gen.dialect_text(dialect, rng)
            gap = int(rng.integers(gap_frames[0], gap_frames[1] + 1))
            feats, spans = gen.render(words, dialect, gen.speaker_offset(dialect, u, stream=s + 1), rng, lead=gap, trail=0)
            speech.append((pos + spans[0][0], pos + spans[-1][1]))
            pieces.append(feats)
            pos += len(feats)
            words_all.append(words)
            dialects.append(dialect)
        tail = int(rng.integers(gap_frames[0], gap_frames[1] + 1))
        tail_feats, _ = gen.render([], dialects[-1], gen.speaker_offset(dialects[-1], utts_per_stream, stream=s + 1), rng, lead=tail, trail=0)
        pieces.append(tail_feats)
        total = pos + tail
        edges = [0] + [x for pair in speech for x in pair] + [total]
        mids = [(edges[2 * i] + edges[2 * i + 1]) / 2 for i in range(len(speech) + 1)]
        streams.append(Stream(np.concatenate(pieces), words_all, dialects, [int(round(m / subsampling)) for m in mids]))
    return streams


def generate_text_corpus(cfg: SynthConfig, n_sentences: int, tagged: bool, seed: int = 0,
                         dialects: Sequence[str] = DIALECTS, specs: Optional[Sequence[DialectSpec]] = None) -> List[str]:
    """Text lines from the same bigram source; tagged lines start with "[XX] "."""
    gen = Generator(cfg, specs)
    rng = np.random.default_rng([cfg.seed, 4, seed])
    lines = []
    for _ in range(n_sentences):
        dialect = dialects[int(rng.integers(len(dialects)))]
        words = gen.dialect_text(dialect, rng)
        lines.append((f"[{dialect}] " if tagged else "") + " ".join(words))
    return lines
