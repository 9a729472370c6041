"""Neural building blocks: convolutional front-end, Conformer and
E-Branchformer encoder blocks, transformer decoder and causal LM backbone."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .vocab import VocabularyError


class ConfigError(ValueError):
    pass


class InputTooShortError(ValueError):
    pass


@dataclass
class FrontendConfig:
    input_dim: int = 16
    model_dim: int = 64


@dataclass
class EncoderConfig:
    variant: str = "conformer_lite"  # or "ebranchformer_lite"
    num_blocks: int = 6
    model_dim: int = 64
    heads: int = 4
    ff_units: int = 256
    cgmlp_units: int = 256
    kernel_size: int = 15
    merge_kernel_size: int = 3
    # Self-attention only looks +-window frames away; None means global.
    attention_window: Optional[int] = 32
    pos_enc: str = "none"  # or "sinusoidal"
    dropout: float = 0.0

    def validate(self) -> None:
        if self.variant not in ("conformer_lite", "ebranchformer_lite"):
            raise ConfigError(f"encoder.variant: unknown variant {self.variant!r}")
        if self.model_dim % self.heads:
            raise ConfigError(f"encoder.heads: model_dim {self.model_dim} not divisible by {self.heads} heads")
        if self.kernel_size % 2 == 0 or self.merge_kernel_size % 2 == 0:
            raise ConfigError("encoder.kernel_size: convolution kernels must be odd")
        if self.num_blocks < 1:
            raise ConfigError("encoder.num_blocks must be positive")
        if self.pos_enc not in ("none", "sinusoidal"):
            raise ConfigError(f"encoder.pos_enc: unknown {self.pos_enc!r}")


@dataclass
class DecoderConfig:
    num_blocks: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_units: int = 256
    dropout: float = 0.0

    def validate(self) -> None:
        if self.model_dim % self.heads:
            raise ConfigError(f"decoder.heads: model_dim {self.model_dim} not divisible by {self.heads} heads")


def subsampled_length(n_frames: int) -> int:
    return -(-(-(-n_frames // 2)) // 2)


def sinusoidal_positions(length: int, dim: int, offset: int = 0, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(offset, offset + length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.to(dtype)


class Frontend(nn.Module):
    """Two stride-2 convolutions over time: (B, T, F) -> (B, ceil(ceil(T/2)/2), d).

    The first convolution has no bias, so an all-zero input yields the same
    bias-only vector at every output frame.
    """

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.input_dim, cfg.model_dim, 3, stride=2, padding=1, bias=False)
        self.conv2 = nn.Conv1d(cfg.model_dim, cfg.model_dim, 3, stride=2, padding=1)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None):
        if x.shape[1] < 4:
            raise InputTooShortError(f"front-end needs at least 4 frames, got {x.shape[1]}")
        if lengths is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        x = x * _time_mask(lengths, x.shape[1])[..., None]
        h = F.silu(self.conv1(x.transpose(1, 2)))
        len1 = (lengths + 1) // 2
        h = h * _time_mask(len1, h.shape[2])[:, None, :]
        h = F.silu(self.conv2(h))
        len2 = (len1 + 1) // 2
        h = self.out(h.transpose(1, 2))
        return h, len2


def _time_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    return (torch.arange(size)[None, :] < lengths[:, None]).to(torch.get_default_dtype())


def valid_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    """(B, size) bool, True on real frames."""
    return torch.arange(size)[None, :] < torch.as_tensor(lengths)[:, None]


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.d_k = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d_k).transpose(1, 2)

    def forward(self, query, key, value, mask: torch.Tensor, window: int | None = None, block: int = 512):
        """``mask`` is (B, Nq, Nk) or (B, 1, Nk) bool of allowed positions."""
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        nq, nk = q.shape[2], k.shape[2]
        if window is not None and nq == nk and nq > block:
            ctx = self._banded(q, k, v, mask, window, block)
        else:
            m = mask[:, None]
            if window is not None:
                idx = torch.arange(nq)
                m = m & ((idx[:, None] - idx[None, :]).abs() <= window)
            ctx = self._attend(q, k, v, m)
        b = ctx.shape[0]
        return self.o(ctx.transpose(1, 2).reshape(b, nq, self.heads * self.d_k))

    def _attend(self, q, k, v, m):
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_k)
        # finite fill: a row with no allowed key must not produce nan gradients
        scores = scores.masked_fill(~m, -1e9)
        attn = torch.softmax(scores, dim=-1).masked_fill(~m, 0.0)
        return self.dropout(attn) @ v

    def _banded(self, q, k, v, mask, window, block):
        # Query blocks against their key band only; memory O(block * (block + 2 window)).
        n = q.shape[2]
        out = []
        for start in range(0, n, block):
            stop = min(n, start + block)
            lo, hi = max(0, start - window), min(n, stop + window)
            qi = torch.arange(start, stop)[:, None]
            kj = torch.arange(lo, hi)[None, :]
            m = mask[:, None, :, lo:hi] if mask.shape[1] == 1 else mask[:, None, start:stop, lo:hi]
            m = m & ((qi - kj).abs() <= window)
            out.append(self._attend(q[:, :, start:stop], k[:, :, lo:hi], v[:, :, lo:hi], m))
        return torch.cat(out, dim=2)


class FeedForward(nn.Module):
    def __init__(self, dim: int, units: int, dropout: float = 0.0):
        super().__init__()
        self.w1 = nn.Linear(dim, units)
        self.w2 = nn.Linear(units, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.dropout(F.silu(self.w1(x))))


class DepthwiseConv(nn.Module):
    """Same-padded depthwise convolution over time on (B, N, C); padded frames are zeroed first."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2, groups=channels)

    def forward(self, x, mask):
        x = x.masked_fill(~mask[..., None], 0.0)
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class ConvModule(nn.Module):
    """Pointwise + GLU, depthwise conv, layer norm, swish, pointwise."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.pw1 = nn.Linear(dim, 2 * dim)
        self.dw = DepthwiseConv(dim, kernel)
        self.norm = nn.LayerNorm(dim)
        self.pw2 = nn.Linear(dim, dim)

    def forward(self, x, mask):
        x = F.glu(self.pw1(x), dim=-1)
        x = F.silu(self.norm(self.dw(x, mask)))
        return self.pw2(x)


class ConformerBlock(nn.Module):
    """Macaron FF (half step), self-attention, convolution, FF (half step), final norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.window = cfg.attention_window
        self.ff1, self.ff2 = FeedForward(d, cfg.ff_units, cfg.dropout), FeedForward(d, cfg.ff_units, cfg.dropout)
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.conv = ConvModule(d, cfg.kernel_size)
        self.norm_ff1, self.norm_att, self.norm_conv, self.norm_ff2, self.norm_out = (nn.LayerNorm(d) for _ in range(5))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = x + 0.5 * self.dropout(self.ff1(self.norm_ff1(x)))
        h = self.norm_att(x)
        x = x + self.dropout(self.attn(h, h, h, mask[:, None, :], self.window))
        x = x + self.dropout(self.conv(self.norm_conv(x), mask))
        x = x + 0.5 * self.dropout(self.ff2(self.norm_ff2(x)))
        return self.norm_out(x)


class ConvGatingMLP(nn.Module):
    """cgMLP: channel projection, swish, convolutional spatial gating, projection back."""

    def __init__(self, dim: int, units: int, kernel: int):
        super().__init__()
        self.proj_in = nn.Linear(dim, units)
        self.gate_norm = nn.LayerNorm(units // 2)
        self.gate_conv = DepthwiseConv(units // 2, kernel)
        self.proj_out = nn.Linear(units // 2, dim)

    def forward(self, x, mask):
        h = F.silu(self.proj_in(x))
        a, g = h.chunk(2, dim=-1)
        g = self.gate_conv(self.gate_norm(g), mask)
        return self.proj_out(a * g)


class EBranchformerBlock(nn.Module):
    """Attention and cgMLP branches in parallel, merged by depthwise conv + linear."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.window = cfg.attention_window
        self.ff1, self.ff2 = FeedForward(d, cfg.ff_units, cfg.dropout), FeedForward(d, cfg.ff_units, cfg.dropout)
        self.attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.cgmlp = ConvGatingMLP(d, cfg.cgmlp_units, cfg.kernel_size)
        self.merge_conv = DepthwiseConv(2 * d, cfg.merge_kernel_size)
        self.merge_proj = nn.Linear(2 * d, d)
        self.norm_ff1, self.norm_att, self.norm_mlp, self.norm_ff2, self.norm_out = (nn.LayerNorm(d) for _ in range(5))
        self.dropout = nn.Dropout(cfg.dropout)

    def branches(self, x, mask):
        h = self.norm_att(x)
        return self.attn(h, h, h, mask[:, None, :], self.window), self.cgmlp(self.norm_mlp(x), mask)

    def merge(self, att, mlp, mask):
        cat = torch.cat([att, mlp], dim=-1)
        return self.merge_proj(cat + self.merge_conv(cat, mask))

    def forward(self, x, mask):
        x = x + 0.5 * self.dropout(self.ff1(self.norm_ff1(x)))
        att, mlp = self.branches(x, mask)
        x = x + self.dropout(self.merge(att, mlp, mask))
        x = x + 0.5 * self.dropout(self.ff2(self.norm_ff2(x)))
        return self.norm_out(x)


@dataclass
class TapOutput:
    layer: int
    hidden: torch.Tensor  # H_e before self-conditioning
    logprobs: Dict[str, torch.Tensor]  # objective -> (B, N, C)


class Encoder(nn.Module):
    """Block stack; after each tapped layer a conditioner rewrites the hidden state.

    ``conditioners`` maps a layer index (1-based) to a module called as
    ``cond(h, mask) -> (h_next, {objective: logprobs})``.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        block = ConformerBlock if cfg.variant == "conformer_lite" else EBranchformerBlock
        self.blocks = nn.ModuleList(block(cfg) for _ in range(cfg.num_blocks))

    def forward(self, x, mask, conditioners: Mapping[int, nn.Module] | None = None) -> Tuple[torch.Tensor, List[TapOutput]]:
        conditioners = conditioners or {}
        for layer in conditioners:
            if not 1 <= layer < self.cfg.num_blocks:
                raise ConfigError(
                    f"taps: layer {layer} outside 1..{self.cfg.num_blocks - 1} (last layer feeds the final CTC head)"
                )
        if self.cfg.pos_enc == "sinusoidal":
            x = x + sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype)
        taps: List[TapOutput] = []
        for layer, block in enumerate(self.blocks, start=1):
            x = block(x, mask)
            if layer in conditioners:
                hidden = x
                x, logprobs = conditioners[layer](hidden, mask)
                taps.append(TapOutput(layer, hidden, logprobs))
        return x, taps

    def receptive_radius(self) -> int:
        """Frames on either side that can influence one output frame (post-subsampling)."""
        c = self.cfg
        att = c.attention_window if c.attention_window is not None else 10**9
        conv = c.kernel_size // 2 + (c.merge_kernel_size // 2 if c.variant == "ebranchformer_lite" else 0)
        return c.num_blocks * (att + conv) + 2


class DecoderBlock(nn.Module):
    """Pre-norm transformer decoder block; ``cross=False`` drops source attention (LM use)."""

    def __init__(self, cfg: DecoderConfig, cross: bool = True):
        super().__init__()
        d = cfg.model_dim
        self.self_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout)
        self.src_attn = MultiHeadAttention(d, cfg.heads, cfg.dropout) if cross else None
        self.ff = FeedForward(d, cfg.ff_units, cfg.dropout)
        self.norm1, self.norm2, self.norm3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, self_mask, memory=None, memory_mask=None):
        h = self.norm1(y)
        y = y + self.dropout(self.self_attn(h, h, h, self_mask))
        if self.src_attn is not None:
            h = self.norm2(y)
            y = y + self.dropout(self.src_attn(h, memory, memory, memory_mask[:, None, :]))
        return y + self.dropout(self.ff(self.norm3(y)))


def causal_mask(length: int) -> torch.Tensor:
    return torch.tril(torch.ones(length, length, dtype=torch.bool))


class TokenStack(nn.Module):
    """Embedding + sinusoidal positions + decoder blocks + output projection.

    The output distribution covers every id except the CTC blank (id 0),
    whose logit is pinned to -inf.
    """

    def __init__(self, vocab_size: int, cfg: DecoderConfig, cross: bool):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.model_dim)
        self.blocks = nn.ModuleList(DecoderBlock(cfg, cross) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.out = nn.Linear(cfg.model_dim, vocab_size)

    def forward(self, tokens: torch.Tensor, memory=None, memory_mask=None) -> torch.Tensor:
        """(B, K) token ids -> (B, K, vocab) log-probabilities."""
        if tokens.numel() and (int(tokens.max()) >= self.vocab_size or int(tokens.min()) < 0):
            raise VocabularyError(f"token id outside vocabulary of size {self.vocab_size}")
        b, k = tokens.shape
        y = self.embed(tokens) * math.sqrt(self.cfg.model_dim)
        y = y + sinusoidal_positions(k, self.cfg.model_dim, dtype=y.dtype)
        mask = causal_mask(k)[None].expand(b, k, k)
        for blk in self.blocks:
            y = blk(y, mask, memory, memory_mask)
        logits = self.out(self.norm(y))
        logits = logits.masked_fill(torch.arange(self.vocab_size) == 0, float("-inf"))
        return torch.log_softmax(logits, dim=-1)


class TransformerDecoder(TokenStack):
    def __init__(self, vocab_size: int, cfg: DecoderConfig):
        super().__init__(vocab_size, cfg, cross=True)

    def step(self, memory: torch.Tensor, prefix: Sequence[int], memory_mask=None) -> torch.Tensor:
        """Log-probabilities of the next token after ``prefix`` (which starts with sos)."""
        if memory.dim() == 2:
            memory = memory[None]
        if memory_mask is None:
            memory_mask = torch.ones(memory.shape[:2], dtype=torch.bool)
        tokens = torch.as_tensor([list(prefix)], dtype=torch.long)
        return self(tokens, memory, memory_mask)[0, -1]


def config_dict(cfg) -> dict:
    return asdict(cfg)
