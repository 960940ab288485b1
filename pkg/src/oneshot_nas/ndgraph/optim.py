"""SGD-momentum and Adam with coupled weight decay, plus schedule helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor

GradMap = Mapping[str, Optional[np.ndarray]]


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    kind: str  # "sgd-momentum" | "adam"
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd_state(lr: float = 0.025, momentum: float = 0.9, weight_decay: float = 3e-4) -> OptimState:
    return OptimState("sgd-momentum", lr=lr, momentum=momentum, weight_decay=weight_decay)


def adam_state(lr: float = 3e-3, weight_decay: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> OptimState:
    return OptimState("adam", lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)


def _effective_grad(name: str, p: Tensor, g: Optional[np.ndarray], wd: float) -> np.ndarray:
    if g is None:
        g = np.zeros_like(p.data)
    elif not np.all(np.isfinite(g)):
        raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    return g + wd * p.data if wd else g


def sgd_step(params: Mapping[str, Tensor], grads: GradMap, state: OptimState, lr: Optional[float] = None) -> None:
    """In-place update ``v <- mu*v + (g + wd*w); w <- w - lr*v``.

    Missing gradients count as zero, so decay and momentum still apply.
    """
    if state.kind != "sgd-momentum":
        raise ValueError(f"sgd_step given a {state.kind} state")
    lr = state.lr if lr is None else lr
    bufs = state.buffers.setdefault("momentum", {})
    updates = {}
    for name, p in params.items():
        updates[name] = _effective_grad(name, p, grads.get(name), state.weight_decay)
    for name, p in params.items():
        v = bufs.get(name)
        v = updates[name] if v is None else state.momentum * v + updates[name]
        bufs[name] = v
        p.data = p.data - lr * v
    state.step += 1


def adam_step(params: Mapping[str, Tensor], grads: GradMap, state: OptimState) -> None:
    """Bias-corrected Adam with weight decay folded into the gradient."""
    if state.kind != "adam":
        raise ValueError(f"adam_step given a {state.kind} state")
    b1, b2 = state.betas
    m_buf = state.buffers.setdefault("m", {})
    v_buf = state.buffers.setdefault("v", {})
    updates = {name: _effective_grad(name, p, grads.get(name), state.weight_decay) for name, p in params.items()}
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = updates[name]
        m = b1 * m_buf.get(name, 0.0) + (1 - b1) * g
        v = b2 * v_buf.get(name, 0.0) + (1 - b2) * g * g
        m_buf[name], v_buf[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def global_norm(grads: GradMap) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))


def clip_gradients(grads: GradMap, max_norm: float) -> Dict[str, Optional[np.ndarray]]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (None if g is None else g * scale) for k, g in grads.items()}
