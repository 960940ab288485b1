"""The candidate cell operations and their parameter sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor


class OpKind(enum.IntEnum):
    MAX_POOL_3X3 = 0
    AVG_POOL_3X3 = 1
    SKIP_CONNECT = 2
    SEP_CONV_3X3 = 3
    SEP_CONV_5X5 = 4
    CONV_1X3_3X1 = 5
    # enlarged set only
    DIL_CONV_3X3 = 6
    DIL_CONV_5X5 = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, text: str) -> "OpKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown op name {text.strip()!r}") from None


STANDARD_OPS = tuple(OpKind)[:6]
ENLARGED_OPS = tuple(OpKind)


@dataclass
class PrimitiveParams:
    kind: OpKind
    c_in: int
    c_out: int
    stride: int
    affine: bool = False
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _kernel(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _norm(tensors: dict, prefix: str, c: int, affine: bool, dtype) -> None:
    if affine:
        tensors[prefix + ".gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        tensors[prefix + ".beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)


def init_primitive(kind: OpKind, c_in: int, c_out: int, stride: int, rng: np.random.Generator,
                   affine: bool = False, dtype=np.float64) -> PrimitiveParams:
    """Allocate parameters for one operation instance."""
    kind = OpKind(kind)
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    t: Dict[str, Tensor] = {}
    if kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3) or (kind == OpKind.SKIP_CONNECT and stride == 1):
        if c_in != c_out:
            raise ShapeError(f"{kind.label} cannot change channels ({c_in} -> {c_out})")
    elif kind == OpKind.SKIP_CONNECT:
        if c_out % 2:
            raise ShapeError(f"factorized reduce needs an even channel count, got {c_out}")
        t["fr1"] = _kernel(rng, (c_out // 2, c_in, 1, 1), c_in, dtype)
        t["fr2"] = _kernel(rng, (c_out // 2, c_in, 1, 1), c_in, dtype)
        _norm(t, "bn", c_out, affine, dtype)
    elif kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        k = 3 if kind == OpKind.SEP_CONV_3X3 else 5
        t["dw1"] = _kernel(rng, (c_in, k, k), k * k, dtype)
        t["pw1"] = _kernel(rng, (c_in, c_in, 1, 1), c_in, dtype)
        _norm(t, "bn1", c_in, affine, dtype)
        t["dw2"] = _kernel(rng, (c_in, k, k), k * k, dtype)
        t["pw2"] = _kernel(rng, (c_out, c_in, 1, 1), c_in, dtype)
        _norm(t, "bn2", c_out, affine, dtype)
    elif kind == OpKind.CONV_1X3_3X1:
        t["w13"] = _kernel(rng, (c_in, c_in, 1, 3), 3 * c_in, dtype)
        t["w31"] = _kernel(rng, (c_out, c_in, 3, 1), 3 * c_in, dtype)
        _norm(t, "bn", c_out, affine, dtype)
    else:
        k = 3 if kind == OpKind.DIL_CONV_3X3 else 5
        t["dw"] = _kernel(rng, (c_in, k, k), k * k, dtype)
        t["pw"] = _kernel(rng, (c_out, c_in, 1, 1), c_in, dtype)
        _norm(t, "bn", c_out, affine, dtype)
    return PrimitiveParams(kind, c_in, c_out, stride, affine, t)


def _bn(x: Tensor, t: dict, prefix: str) -> Tensor:
    g = t.get(prefix + ".gamma")
    return F.batch_norm(x, g, t.get(prefix + ".beta")) if g is not None else F.batch_norm(x)


def factorized_reduce(x: Tensor, t: dict) -> Tensor:
    """Halve resolution with two offset stride-2 1x1 convolutions."""
    x = F.relu(x)
    a = F.conv2d(x, t["fr1"], stride=2)
    b = F.conv2d(F.shift_pad(x), t["fr2"], stride=2)
    return _bn(F.concat([a, b], axis=1), t, "bn")


def apply_primitive(kind: OpKind, x: Tensor, p: PrimitiveParams) -> Tensor:
    """Apply one candidate operation with same-padding."""
    if x.ndim != 4:
        raise ShapeError(f"primitives expect (B, C, H, W) input, got {x.shape}")
    if x.shape[1] != p.c_in or OpKind(kind) != p.kind:
        raise ShapeError(f"{OpKind(kind).label}: input {x.shape} does not match params "
                         f"({p.kind.label}, c_in={p.c_in})")
    s, t = p.stride, p.tensors
    if kind == OpKind.MAX_POOL_3X3:
        return F.max_pool2d(x, 3, s, 1)
    if kind == OpKind.AVG_POOL_3X3:
        return F.avg_pool2d(x, 3, s, 1)
    if kind == OpKind.SKIP_CONNECT:
        return x if s == 1 else factorized_reduce(x, t)
    if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        pad = 1 if kind == OpKind.SEP_CONV_3X3 else 2
        y = F.depthwise_conv2d(F.relu(x), t["dw1"], stride=s, padding=pad)
        y = _bn(F.conv2d(y, t["pw1"]), t, "bn1")
        y = F.depthwise_conv2d(F.relu(y), t["dw2"], stride=1, padding=pad)
        return _bn(F.conv2d(y, t["pw2"]), t, "bn2")
    if kind == OpKind.CONV_1X3_3X1:
        y = F.conv2d(F.relu(x), t["w13"], stride=(1, s), padding=(0, 1))
        y = F.conv2d(y, t["w31"], stride=(s, 1), padding=(1, 0))
        return _bn(y, t, "bn")
    pad = 2 if kind == OpKind.DIL_CONV_3X3 else 4
    y = F.depthwise_conv2d(F.relu(x), t["dw"], stride=s, padding=pad, dilation=2)
    return _bn(F.conv2d(y, t["pw"]), t, "bn")
