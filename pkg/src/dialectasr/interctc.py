"""Intermediate CTC taps with self-conditioning, and loss composition.

A tap at encoder layer ``e`` projects the layer output through one CTC head
per objective, then hands ``NRM(H_e) + sum_obj LIN_obj(Z_obj)`` to layer
``e + 1``.  The intermediate losses are averaged and mixed with the final CTC
loss by ``alpha``; the result is mixed with the decoder loss by ``lam``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import torch
from torch import nn

from .blocks import ConfigError
from .ctc import ctc_loss_batch

ASR = "asr"
DID = "did"
OBJECTIVES = (ASR, DID)


@dataclass(frozen=True)
class TapAssignment:
    """Encoder layer -> objectives evaluated there (``{asr, did}`` is a multi-task tap)."""

    taps: Tuple[Tuple[int, Tuple[str, ...]], ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, Iterable[str]]) -> "TapAssignment":
        items = []
        for layer in sorted(mapping):
            objs = tuple(o for o in OBJECTIVES if o in set(mapping[layer]))
            unknown = set(mapping[layer]) - set(OBJECTIVES)
            if unknown:
                raise ConfigError(f"taps: unknown objective(s) {sorted(unknown)} at layer {layer}")
            if not objs:
                raise ConfigError(f"taps: layer {layer} has no objective")
            items.append((int(layer), objs))
        return cls(tuple(items))

    def validate(self, num_blocks: int) -> None:
        layers = self.layers
        if layers != sorted(set(layers)):
            raise ConfigError("taps: layers must be strictly ascending")
        for layer in layers:
            if not 1 <= layer < num_blocks:
                raise ConfigError(f"taps: layer {layer} outside 1..{num_blocks - 1}")

    @property
    def layers(self) -> List[int]:
        return [layer for layer, _ in self.taps]

    def as_dict(self) -> Dict[int, Tuple[str, ...]]:
        return dict(self.taps)

    def pairs(self) -> List[Tuple[int, str]]:
        return [(layer, obj) for layer, objs in self.taps for obj in objs]

    def did_layers(self) -> List[int]:
        return [layer for layer, objs in self.taps if DID in objs]

    def to_json(self) -> List[dict]:
        return [{"layer": layer, "objectives": list(objs)} for layer, objs in self.taps]

    @classmethod
    def from_json(cls, entries: Sequence[Mapping]) -> "TapAssignment":
        return cls.from_mapping({int(e["layer"]): e["objectives"] for e in entries})

    def describe(self) -> Tuple[str, str]:
        mt = [str(layer) for layer, objs in self.taps if set(objs) == {ASR, DID}]
        did = [str(layer) for layer, objs in self.taps if objs == (DID,)]
        asr = [str(layer) for layer, objs in self.taps if objs == (ASR,)]
        fmt = lambda xs: "L " + ", ".join(xs) if xs else "-"
        mt_s = fmt(mt) if not asr else fmt(mt) + " / ASR " + fmt(asr)
        return mt_s, fmt(did)


def full_layer_to_desk(layer: int, full_depth: int = 12, desk_depth: int = 6) -> int:
    """Layer l of the 12-block encoder maps to ceil(l / 2) of the 6-block one."""
    ratio = full_depth // desk_depth
    return -(-layer // ratio)


def _preset(multitask: Sequence[int], did: Sequence[int]) -> TapAssignment:
    mapping: Dict[int, set] = {}
    for layer in multitask:
        mapping.setdefault(full_layer_to_desk(layer), set()).update((ASR, DID))
    for layer in did:
        mapping.setdefault(full_layer_to_desk(layer), set()).add(DID)
    return TapAssignment.from_mapping(mapping)


# The seven InterCTC layer assignments compared in the layer sweep, named by
# (multi-task layers, DID-only layers) on the 12-block reference encoder.
PLACEMENT_PRESETS: Dict[str, TapAssignment] = {
    "row1_none": _preset([], []),
    "row2_did369": _preset([], [3, 6, 9]),
    "row3_did36": _preset([], [3, 6]),
    "row4_did3": _preset([], [3]),
    "row5_mt9_did36": _preset([9], [3, 6]),
    "row6_mt69_did3": _preset([6, 9], [3]),
    "row7_mt369": _preset([3, 6, 9], []),
}
BEST_PRESET = "row6_mt69_did3"


class CtcHead(nn.Module):
    """Linear projection to blank + V' followed by log-softmax."""

    def __init__(self, dim: int, ctc_dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, ctc_dim)

    def forward(self, h):
        return torch.log_softmax(self.proj(h), dim=-1)


def self_condition(norm: nn.Module, lins: Mapping[str, nn.Module], hidden, posteriors: Mapping[str, torch.Tensor]):
    """NRM(H_e) + sum over objectives of LIN_obj(Z_obj)."""
    for obj, z in posteriors.items():
        if z.shape[:-1] != hidden.shape[:-1]:
            raise ConfigError(f"self_condition: posterior {obj} shape {tuple(z.shape)} vs hidden {tuple(hidden.shape)}")
    out = norm(hidden)
    for obj, z in posteriors.items():
        out = out + lins[obj](z)
    return out


class InterCtcTap(nn.Module):
    """Per-layer CTC heads, per-objective injection layers and a private layer norm."""

    def __init__(self, dim: int, ctc_dim: int, objectives: Sequence[str]):
        super().__init__()
        self.objectives = tuple(objectives)
        self.heads = nn.ModuleDict({o: CtcHead(dim, ctc_dim) for o in self.objectives})
        self.lins = nn.ModuleDict({o: nn.Linear(ctc_dim, dim) for o in self.objectives})
        self.norm = nn.LayerNorm(dim)

    def forward(self, hidden, mask):
        logprobs = {o: self.heads[o](hidden) for o in self.objectives}
        posteriors = {o: lp.exp() for o, lp in logprobs.items()}
        return self_condition(self.norm, self.lins, hidden, posteriors), logprobs


def intermediate_losses(tap_outputs, lengths, targets: Mapping[str, Sequence[Sequence[int]]]):
    """One mean-over-batch CTC loss per (layer, objective), in tap order.

    ``targets`` maps each objective to the per-utterance token sequences.
    Returns a list of ``((layer, objective), loss)``.
    """
    out = []
    for tap in tap_outputs:
        for obj, lp in tap.logprobs.items():
            per_utt = ctc_loss_batch(lp, lengths, targets[obj])
            out.append(((tap.layer, obj), per_utt.mean()))
    return out


def _check_weight(name: str, w: float) -> None:
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {w}")


def compose_ctc_loss(inter_losses: Sequence, ctc_loss, alpha: float):
    """alpha * mean(inter_losses) + (1 - alpha) * ctc_loss; the final loss alone when there are no taps."""
    _check_weight("alpha", alpha)
    if len(inter_losses) == 0:
        return ctc_loss
    mean = sum(inter_losses) / len(inter_losses)
    return alpha * mean + (1 - alpha) * ctc_loss


def compose_total_loss(ctc_part, dec_loss, lam: float = 0.3):
    _check_weight("lambda", lam)
    return lam * ctc_part + (1 - lam) * dec_loss


@dataclass
class InterLossReport:
    inter: List[Tuple[Tuple[int, str], float]] = field(default_factory=list)
    inter_mean: float = 0.0
    ctc: float = 0.0
    ctc_composed: float = 0.0
    decoder: float = 0.0
    decoder_nll: float = 0.0
    total: float = 0.0
    alpha: float = 0.5
    lam: float = 0.3

    def recompose(self) -> Tuple[float, float]:
        """Re-evaluate the composed CTC loss and total from the stored parts."""
        values = [v for _, v in self.inter]
        ctc_part = compose_ctc_loss(values, self.ctc, self.alpha)
        return ctc_part, compose_total_loss(ctc_part, self.decoder, self.lam)

    def asr_loss(self) -> float:
        """The plain hybrid objective without intermediate terms."""
        return self.lam * self.ctc + (1 - self.lam) * self.decoder
