"""Learned distribution over node quadruples, used to pick promising candidates."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Tuple

import numpy as np

from .data import Batch
from .ndgraph import functional as F
from .ndgraph.optim import OptimState, adam_step, clip_gradients
from .ndgraph.tensor import Tensor, backward, zero_grad
from .space import CELL_TYPES, Genotype, NodeSpec, SpaceConfig, canonicalize, decode_function_pair
from .supernet import NonFiniteLoss, TemplateNetwork


@dataclass
class EvaluatorParams:
    """Logits ``f``, ``g`` (input choices) and ``h`` (op-pair choice) per cell type and node."""

    space: SpaceConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    def vectors(self, cell_type: str, node: int) -> Tuple[Tensor, Tensor, Tensor]:
        p = self.params
        key = f"{cell_type}.n{node}"
        return p[key + ".f"], p[key + ".g"], p[key + ".h"]

    def copy(self) -> "EvaluatorParams":
        return EvaluatorParams(self.space, {k: Tensor(v.data.copy(), requires_grad=True)
                                            for k, v in self.params.items()})


@dataclass
class ArchDistribution:
    probs: Dict[str, np.ndarray]

    def vectors(self, cell_type: str, node: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        key = f"{cell_type}.n{node}"
        return self.probs[key + ".f"], self.probs[key + ".g"], self.probs[key + ".h"]


class CandidateSet(NamedTuple):
    genotypes: List[Genotype]
    shortfall: bool
    attempts: int


def init_alpha(space: SpaceConfig, dtype=np.float64) -> EvaluatorParams:
    """All-zero logits, i.e. uniform choices everywhere."""
    params = {}
    for kind in CELL_TYPES:
        for i in range(space.B):
            n_in = space.num_inputs(i)
            params[f"{kind}.n{i}.f"] = Tensor(np.zeros(n_in, dtype=dtype), requires_grad=True)
            params[f"{kind}.n{i}.g"] = Tensor(np.zeros(n_in, dtype=dtype), requires_grad=True)
            params[f"{kind}.n{i}.h"] = Tensor(np.zeros(space.num_pairs, dtype=dtype), requires_grad=True)
    return EvaluatorParams(space, params)


def _softmax(v: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(v)):
        raise ValueError("evaluator logits must be finite")
    z = np.exp(v - v.max())
    return z / z.sum()


def arch_probabilities(alpha: EvaluatorParams) -> ArchDistribution:
    return ArchDistribution({k: _softmax(t.data) for k, t in alpha.params.items()})


def pair_marginal_matrices(size_o: int) -> Tuple[np.ndarray, np.ndarray]:
    """0/1 matrices mapping pair probabilities to per-op mass as first / second function."""
    n = size_o * (size_o + 1) // 2
    first = np.zeros((size_o, n))
    second = np.zeros((size_o, n))
    for r in range(1, n + 1):
        r1, r2 = decode_function_pair(r, size_o)
        first[r1 - 1, r - 1] = 1.0
        second[r2 - 1, r - 1] = 1.0
    return first, second


def relaxed_weights(alpha: EvaluatorParams, differentiable: bool = True) -> Dict[str, List[Tensor]]:
    """Mixture weight of every (op, input) branch, per cell type and node.

    The relaxed node output ``sum_r h_r (sum_t f_t O_r1(I_t) + sum_u g_u O_r2(I_u))``
    regroups as ``sum_k sum_t (a_k f_t + b_k g_t) O_k(I_t)`` where ``a_k``
    (``b_k``) is the pair mass with ``k`` as first (second) function.
    Weights are op-major: index ``k * |I| + t``.
    """
    first, second = pair_marginal_matrices(alpha.space.num_ops)
    out: Dict[str, List[Tensor]] = {}
    for kind in CELL_TYPES:
        per_node = []
        for i in range(alpha.space.B):
            f, g, h = alpha.vectors(kind, i)
            if not differentiable:
                f, g, h = Tensor(f.data), Tensor(g.data), Tensor(h.data)
            hp = F.softmax(h)
            w = F.add(F.outer(F.matvec_const(first, hp), F.softmax(f)),
                      F.outer(F.matvec_const(second, hp), F.softmax(g)))
            per_node.append(F.reshape(w, (-1,)))
        out[kind] = per_node
    return out


def relaxed_forward(omega: TemplateNetwork, alpha: EvaluatorParams, batch) -> Tensor:
    x = batch.x if isinstance(batch, Batch) else batch
    return omega.forward_relaxed(x, relaxed_weights(alpha))


@contextmanager
def frozen(params: Mapping[str, Tensor]):
    """Temporarily stop recording gradients for ``params``."""
    saved = {k: t.requires_grad for k, t in params.items()}
    for t in params.values():
        t.requires_grad = False
    try:
        yield
    finally:
        for k, t in params.items():
            t.requires_grad = saved[k]


def train_step_alpha(omega: TemplateNetwork, alpha: EvaluatorParams, batch: Batch, opt: OptimState,
                     clip: float = 10.0) -> float:
    """One evaluator update on a validation batch; template parameters stay fixed."""
    if isinstance(batch, Batch) and batch.split != "val":
        raise ValueError(f"evaluator training must only see 'val' batches, got {batch.split!r}")
    zero_grad(alpha.params)
    with frozen(omega.params):
        loss = F.cross_entropy(relaxed_forward(omega, alpha, batch), batch.y)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"evaluator validation loss is {value}")
        grads = backward(loss, alpha.params)
    adam_step(alpha.params, clip_gradients(grads, clip), opt)
    return value


# ---------------------------------------------------------------- sampling

def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(p) - 1))


def sample_quadruples(alpha: EvaluatorParams, rng: np.random.Generator,
                      dist: ArchDistribution | None = None) -> Dict[str, List[Tuple[int, int, int]]]:
    """Raw ``(t, u, r)`` draws per cell type and node (``r`` 1-based)."""
    dist = dist or arch_probabilities(alpha)
    out = {}
    for kind in CELL_TYPES:
        rows = []
        for i in range(alpha.space.B):
            f, g, h = dist.vectors(kind, i)
            rows.append((_categorical(f, rng), _categorical(g, rng), _categorical(h, rng) + 1))
        out[kind] = rows
    return out


def _to_genotype(space: SpaceConfig, quads: Mapping[str, List[Tuple[int, int, int]]]) -> Genotype:
    cells = []
    for kind in CELL_TYPES:
        nodes = []
        for t, u, r in quads[kind]:
            r1, r2 = decode_function_pair(r, space.num_ops)
            nodes.append(NodeSpec(t, u, space.op_set[r1 - 1], space.op_set[r2 - 1]))
        cells.append(tuple(nodes))
    return canonicalize(Genotype(*cells))


def sample_architecture(alpha: EvaluatorParams, rng: np.random.Generator,
                        dist: ArchDistribution | None = None) -> Genotype:
    """Draw one canonical genotype from the evaluator's distribution."""
    return _to_genotype(alpha.space, sample_quadruples(alpha, rng, dist))


def sample_top_candidates(alpha: EvaluatorParams, T: int, rng: np.random.Generator,
                          max_attempts: int = 10_000) -> CandidateSet:
    """Up to ``T`` distinct genotypes drawn from the evaluator, in first-seen order."""
    if T < 1:
        raise ValueError("T must be at least 1")
    dist = arch_probabilities(alpha)
    seen: Dict[Genotype, None] = {}
    attempts = 0
    while len(seen) < T and attempts < max_attempts:
        seen.setdefault(sample_architecture(alpha, rng, dist), None)
        attempts += 1
    return CandidateSet(list(seen), len(seen) < T, attempts)


def argmax_genotype(alpha: EvaluatorParams) -> Genotype:
    """Most likely choice per node; ties go to the lowest index."""
    dist = arch_probabilities(alpha)
    quads = {kind: [tuple(int(np.argmax(v)) for v in dist.vectors(kind, i)) for i in range(alpha.space.B)]
             for kind in CELL_TYPES}
    return _to_genotype(alpha.space, {k: [(t, u, r + 1) for t, u, r in rows] for k, rows in quads.items()})
