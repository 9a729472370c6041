"""Hybrid CTC/attention model with InterCTC taps, multi-task targets and DID."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .autodiff import load_checkpoint, save_checkpoint
from .blocks import (
    ConfigError,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    Frontend,
    FrontendConfig,
    TransformerDecoder,
    valid_mask,
)
from .ctc import CtcInfeasibleError, check_feasible, ctc_greedy_decode, ctc_loss_batch
from .interctc import (
    ASR,
    DID,
    CtcHead,
    InterCtcTap,
    InterLossReport,
    TapAssignment,
    compose_ctc_loss,
    compose_total_loss,
    intermediate_losses,
)
from .vocab import LabelError, Vocabulary


@dataclass
class ModelConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    taps: TapAssignment = field(default_factory=TapAssignment)
    alpha: float = 0.5
    lam: float = 0.3
    label_smoothing: float = 0.1
    # Untagged ASR-only targets (no dialect tag anywhere); used for ablations.
    tagged_targets: bool = True

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        self.taps.validate(self.encoder.num_blocks)
        if self.frontend.model_dim != self.encoder.model_dim or self.encoder.model_dim != self.decoder.model_dim:
            raise ConfigError("model_dim: frontend, encoder and decoder dims must agree")
        for name in ("alpha", "lam", "label_smoothing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["taps"] = self.taps.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model config: unknown key(s) {sorted(unknown)}")
        return cls(
            frontend=FrontendConfig(**d.pop("frontend", {})),
            encoder=EncoderConfig(**d.pop("encoder", {})),
            decoder=DecoderConfig(**d.pop("decoder", {})),
            taps=TapAssignment.from_json(d.pop("taps", [])),
            **d,
        )


@dataclass
class UtteranceTargets:
    decoder: List[int]  # [sos, tag, tokens..., eos]
    ctc: List[int]  # [tag, tokens...]; also the ASR InterCTC target
    did: List[int]  # [tag]
    tag: int

    @property
    def asr_inter(self) -> List[int]:
        return self.ctc


def build_targets(tokens: Sequence[int], dialect: str, vocab: Vocabulary, tagged: bool = True) -> UtteranceTargets:
    tag = vocab.tag_id(dialect)
    for t in tokens:
        if vocab.is_tag_id(t) or not 1 <= t <= len(vocab):
            raise LabelError(f"text token id {t} is not a base token")
    head = [tag] if tagged else []
    body = head + list(tokens)
    return UtteranceTargets([vocab.sos] + body + [vocab.eos], body, [tag], tag)


def strip_dialect(ids: Sequence[int], vocab: Vocabulary) -> List[int]:
    return [i for i in ids if not vocab.is_tag_id(i) and i not in (vocab.sos, vocab.blank)]


@dataclass
class Batch:
    features: torch.Tensor  # (B, T, F), zero padded
    lengths: torch.Tensor  # (B,)
    targets: List[UtteranceTargets]
    ids: List[str] = field(default_factory=list)

    @classmethod
    def collate(cls, feats: Sequence[np.ndarray], targets: Sequence[UtteranceTargets], ids=None, dtype=torch.float32):
        tmax = max(f.shape[0] for f in feats)
        x = np.zeros((len(feats), tmax, feats[0].shape[1]), dtype=np.float64)
        for i, f in enumerate(feats):
            x[i, : f.shape[0]] = f
        lengths = torch.as_tensor([f.shape[0] for f in feats], dtype=torch.long)
        return cls(torch.as_tensor(x, dtype=dtype), lengths, list(targets), list(ids or []))


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (B, N, d)
    lengths: torch.Tensor
    mask: torch.Tensor
    ctc_logprobs: torch.Tensor  # (B, N, C)
    taps: list


@dataclass
class DidPrediction:
    dialect: Optional[str]
    source: str  # "interctc" or "decoder"
    clean: bool
    note: str
    layer: Optional[int] = None


class CapabilityError(RuntimeError):
    pass


def _label_smoothed_nll(logp: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, smoothing: float):
    """Per-utterance summed loss over valid positions; blank (id 0) is excluded from smoothing."""
    nll = -logp.gather(-1, target[..., None])[..., 0]
    if smoothing > 0:
        uniform = -logp[..., 1:].mean(-1)
        loss = (1 - smoothing) * nll + smoothing * uniform
    else:
        loss = nll
    return (loss * mask).sum(-1), (nll * mask).sum(-1)


class HybridModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.encoder.model_dim
        self.frontend = Frontend(cfg.frontend)
        self.encoder = Encoder(cfg.encoder)
        self.ctc_head = CtcHead(d, vocab.ctc_dim)
        self.taps = nn.ModuleDict(
            {str(layer): InterCtcTap(d, vocab.ctc_dim, objs) for layer, objs in cfg.taps.taps}
        )
        self.decoder = TransformerDecoder(vocab.output_dim, cfg.decoder)

    def encode(self, features: torch.Tensor, lengths: torch.Tensor | None = None) -> EncoderOutput:
        if features.dim() == 2:
            features = features[None]
        x, lens = self.frontend(features, lengths)
        mask = valid_mask(lens, x.shape[1])
        conds = {int(k): v for k, v in self.taps.items()}
        h, taps = self.encoder(x, mask, conds)
        return EncoderOutput(h, lens, mask, self.ctc_head(h), taps)

    def forward_train(self, batch: Batch):
        """Loss tensor (float64) and an :class:`InterLossReport` of its parts."""
        enc = self.encode(batch.features, batch.lengths)
        lengths = enc.lengths.tolist()
        for i, (n, tg) in enumerate(zip(lengths, batch.targets)):
            utt = batch.ids[i] if batch.ids else i
            check_feasible(n, tg.ctc, utt)
        ctc = ctc_loss_batch(enc.ctc_logprobs, lengths, [t.ctc for t in batch.targets]).double().mean()
        inter_targets = {ASR: [t.asr_inter for t in batch.targets], DID: [t.did for t in batch.targets]}
        inter = [(key, loss.double()) for key, loss in intermediate_losses(enc.taps, lengths, inter_targets)]

        k = max(len(t.decoder) for t in batch.targets) - 1
        ys_in = torch.full((len(batch.targets), k), self.vocab.eos, dtype=torch.long)
        # padded positions point at eos, not blank, so the masked-out nll stays finite
        ys_out = torch.full((len(batch.targets), k), self.vocab.eos, dtype=torch.long)
        ys_mask = torch.zeros((len(batch.targets), k), dtype=torch.bool)
        for i, t in enumerate(batch.targets):
            n = len(t.decoder) - 1
            ys_in[i, :n] = torch.as_tensor(t.decoder[:-1])
            ys_out[i, :n] = torch.as_tensor(t.decoder[1:])
            ys_mask[i, :n] = True
        logp = self.decoder(ys_in, enc.hidden, enc.mask)
        dec, dec_nll = _label_smoothed_nll(logp, ys_out, ys_mask, self.cfg.label_smoothing)
        dec, dec_nll = dec.double().mean(), dec_nll.double().mean()

        ctc_part = compose_ctc_loss([v for _, v in inter], ctc, self.cfg.alpha)
        total = compose_total_loss(ctc_part, dec, self.cfg.lam)
        report = InterLossReport(
            inter=[(key, v.item()) for key, v in inter],
            inter_mean=(sum(v.item() for _, v in inter) / len(inter)) if inter else 0.0,
            ctc=ctc.item(),
            ctc_composed=ctc_part.item(),
            decoder=dec.item(),
            decoder_nll=dec_nll.item(),
            total=total.item(),
            alpha=self.cfg.alpha,
            lam=self.cfg.lam,
        )
        return total, report

    def sequence_logprob(self, features: torch.Tensor, sequence: Sequence[int]) -> torch.Tensor:
        """Teacher-forced decoder log-likelihood of ``sequence`` (tokens after sos, eos included)."""
        enc = self.encode(features)
        ys = torch.as_tensor([[self.vocab.sos] + list(sequence)], dtype=torch.long)
        logp = self.decoder(ys[:, :-1], enc.hidden, enc.mask)
        return logp[0].gather(-1, ys[0, 1:, None]).sum()

    def did_layer(self) -> Optional[int]:
        layers = self.cfg.taps.did_layers()
        return min(layers) if layers else None

    # bundle I/O ---------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(json.dumps(self.cfg.to_json(), indent=2), encoding="utf-8")
        self.vocab.save(directory / "vocab.txt")
        save_checkpoint(self.state_dict(), directory / "model.ictx")

    @classmethod
    def load(cls, directory: str | Path) -> "HybridModel":
        directory = Path(directory)
        cfg = ModelConfig.from_json(json.loads((directory / "config.json").read_text(encoding="utf-8")))
        model = cls(cfg, Vocabulary.load(directory / "vocab.txt"))
        model.load_state_dict(load_checkpoint(directory / "model.ictx"))
        model.eval()
        return model


def predict_did(
    tap_logprobs: Optional[np.ndarray],
    vocab: Vocabulary,
    decoder_tag: Optional[int] = None,
    layer: Optional[int] = None,
) -> DidPrediction:
    """Dialect from the greedy-decoded DID tap, with summed tag posterior mass as fallback.

    Without a DID tap the decoder's leading tag is used and flagged as such.
    """
    if tap_logprobs is None:
        if decoder_tag is not None and vocab.is_tag_id(decoder_tag):
            return DidPrediction(vocab.dialect_of(decoder_tag), "decoder", False, "no DID tap; decoder tag used")
        raise CapabilityError("no DID tap and no decoder tag available")
    lp = np.asarray(tap_logprobs, dtype=np.float64)
    hyp = ctc_greedy_decode(lp)
    tags = vocab.tag_ids
    if len(hyp) == 1 and hyp[0] in tags:
        return DidPrediction(vocab.dialect_of(hyp[0]), "interctc", True, "greedy", layer)
    mass = np.exp(lp[:, tags]).sum(axis=0)
    best = tags[int(np.argmax(mass))]
    if not hyp:
        note = "greedy output empty; posterior mass fallback"
    else:
        note = f"greedy output {vocab.decode(hyp)} is not a single tag; posterior mass fallback"
    return DidPrediction(vocab.dialect_of(best), "interctc", False, note, layer)
