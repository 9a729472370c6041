"""Dense tensor layer: a closed op registry over torch, gradient helpers and
the ``ICTX1`` checkpoint container.

Tensors are plain ``torch.Tensor`` objects; the autograd tape plays the role
of the computation graph.  Every op kind the rest of the package relies on is
listed in :data:`OPS` so it can be exercised uniformly against finite
differences.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"ICTX1"


class DimensionError(ValueError):
    """Input shapes do not conform to the op's broadcasting/contraction rule."""


class ContractError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _broadcastable(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    for axis, (x, y) in enumerate(zip(reversed(a.shape), reversed(b.shape))):
        if x != y and x != 1 and y != 1:
            raise DimensionError(
                f"{op}: cannot broadcast axis -{axis + 1} ({x} vs {y}) of shapes "
                f"{tuple(a.shape)} and {tuple(b.shape)}"
            )


def _add(inputs, attrs):
    a, b = inputs
    _broadcastable("add", a, b)
    return a + b


def _mul(inputs, attrs):
    a, b = inputs
    _broadcastable("mul", a, b)
    return a * b


def _matmul(inputs, attrs):
    a, b = inputs
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(
            f"matmul: contraction axis mismatch, lhs axis -1 has {a.shape[-1]}, "
            f"rhs axis -2 has {b.shape[-2] if b.dim() > 1 else b.shape[0]}"
        )
    return a @ b


def _transpose(inputs, attrs):
    (x,) = inputs
    d0, d1 = attrs.get("dims", (-2, -1))
    return x.transpose(d0, d1)


def _slice(inputs, attrs):
    (x,) = inputs
    axis = attrs.get("axis", 0)
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"slice: range [{start}, {stop}) outside axis {axis} of size {x.shape[axis]}")
    return x.narrow(axis, start, stop - start)


def _concat(inputs, attrs):
    axis = attrs.get("axis", 0)
    ref = inputs[0]
    for other in inputs[1:]:
        if other.dim() != ref.dim():
            raise DimensionError(f"concat: rank mismatch {ref.dim()} vs {other.dim()}")
        for ax in range(ref.dim()):
            if ax % ref.dim() != axis % ref.dim() and other.shape[ax] != ref.shape[ax]:
                raise DimensionError(f"concat: axis {ax} differs ({ref.shape[ax]} vs {other.shape[ax]})")
    return torch.cat(list(inputs), dim=axis)


def _layer_norm(inputs, attrs):
    x = inputs[0]
    eps = attrs.get("eps", 1e-5)
    weight = inputs[1] if len(inputs) > 1 else None
    bias = inputs[2] if len(inputs) > 2 else None
    if weight is not None and weight.shape[-1] != x.shape[-1]:
        raise DimensionError(f"layer_norm: axis -1 of input ({x.shape[-1]}) != weight ({weight.shape[-1]})")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def _depthwise_conv1d(inputs, attrs):
    # x: (B, T, C), kernel: (C, K) -> same-padded depthwise convolution along T
    x, kernel = inputs[0], inputs[1]
    bias = inputs[2] if len(inputs) > 2 else None
    if x.shape[-1] != kernel.shape[0]:
        raise DimensionError(f"depthwise_conv1d: channel axis -1 ({x.shape[-1]}) != kernel axis 0 ({kernel.shape[0]})")
    k = kernel.shape[1]
    if k % 2 == 0:
        raise DimensionError(f"depthwise_conv1d: kernel size {k} must be odd")
    y = F.conv1d(x.transpose(1, 2), kernel.unsqueeze(1), bias, padding=k // 2, groups=kernel.shape[0])
    return y.transpose(1, 2)


def _embedding(inputs, attrs):
    table = inputs[0]
    ids = attrs["ids"]
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise DimensionError(f"embedding: id outside table axis 0 of size {table.shape[0]}")
    return F.embedding(ids, table)


def _masked_fill(inputs, attrs):
    (x,) = inputs
    mask = torch.as_tensor(attrs["mask"], dtype=torch.bool)
    if mask.shape != x.shape:
        try:
            torch.broadcast_shapes(mask.shape, x.shape)
        except RuntimeError as exc:
            raise DimensionError(f"masked_fill: mask {tuple(mask.shape)} vs input {tuple(x.shape)}") from exc
    return x.masked_fill(mask, attrs.get("value", 0.0))


def _reduce(fn):
    def run(inputs, attrs):
        (x,) = inputs
        axis = attrs.get("axis")
        if axis is None:
            return fn(x)
        return fn(x, dim=axis, keepdim=attrs.get("keepdim", False))

    return run


OPS: Dict[str, Callable[[Sequence[torch.Tensor], Mapping], torch.Tensor]] = {
    "add": _add,
    "mul": _mul,
    "matmul": _matmul,
    "transpose": _transpose,
    "slice": _slice,
    "concat": _concat,
    "softmax": lambda inputs, attrs: torch.softmax(inputs[0], dim=attrs.get("axis", -1)),
    "log_softmax": lambda inputs, attrs: torch.log_softmax(inputs[0], dim=attrs.get("axis", -1)),
    "sigmoid": lambda inputs, attrs: torch.sigmoid(inputs[0]),
    "swish": lambda inputs, attrs: F.silu(inputs[0]),
    "tanh": lambda inputs, attrs: torch.tanh(inputs[0]),
    "layer_norm": _layer_norm,
    "depthwise_conv1d": _depthwise_conv1d,
    "embedding": _embedding,
    "masked_fill": _masked_fill,
    "sum": _reduce(torch.sum),
    "mean": _reduce(torch.mean),
}


def op_forward(kind: str, inputs: Sequence[torch.Tensor], attrs: Mapping | None = None) -> torch.Tensor:
    """Run one registered op; raises :class:`DimensionError` on shape mismatch."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}; available: {sorted(OPS)}") from None
    return fn([torch.as_tensor(x) for x in inputs], dict(attrs or {}))


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor]) -> Dict[int, torch.Tensor]:
    """Accumulate dloss/dparam into ``param.grad`` and return ``{id(param): grad}``.

    Gradients add up across calls until :func:`zero_grad` is called.  Params
    that the loss does not reach get an explicit zero gradient.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    if loss.requires_grad:
        loss.backward()
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        out[id(p)] = p.grad
    return out


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Worst elementwise relative error between autograd and central differences.

    ``f`` is re-evaluated with each probed element nudged by +-eps, so it must be
    deterministic.  ``max_per_param`` probes a seeded random subset of elements
    of each parameter instead of all of them.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericalError(f"non-finite loss {loss.item()} (grad_fn={loss.grad_fn})")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and flat.numel() > max_per_param:
                idx = rng.choice(flat.numel(), size=max_per_param, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericalError(f"non-finite value probing element {i} of shape {tuple(p.shape)}")
                numeric = (up - down) / (2 * eps)
                exact = g.reshape(-1)[i].item()
                err = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
                worst = max(worst, err)
    return worst


def save_checkpoint(tensors: Mapping[str, torch.Tensor], path: str | Path) -> None:
    """Write named tensors as float32 records behind the ``ICTX1`` magic."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, tensor in tensors.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:5] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not an ICTX1 checkpoint")
    pos = 5
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    out: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}q", data, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        out[name] = torch.from_numpy(arr.copy())
    return out


def param_names(module: torch.nn.Module) -> List[str]:
    return [name for name, _ in module.named_parameters()]
