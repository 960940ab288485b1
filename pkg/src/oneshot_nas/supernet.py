"""Weight-sharing template network: path sampling, training step, one-shot evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Batch, Dataset
from .ndgraph import functional as F
from .ndgraph.optim import OptimState, clip_gradients, sgd_step
from .ndgraph.primitives import OpKind, PrimitiveParams, apply_primitive, factorized_reduce, init_primitive
from .ndgraph.tensor import ShapeError, Tensor, backward, no_grad, zero_grad
from .space import (
    CELL_TYPES,
    Genotype,
    MacroConfig,
    NetworkDescription,
    NodeSpec,
    SpaceConfig,
    canonicalize,
    macro_layout,
    uniform_node,
)

# one tuple of node specs per cell instance
PathSample = Tuple[Tuple[NodeSpec, ...], ...]

PrimKey = Tuple[int, int, int, OpKind]  # (cell, node, input, op)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class DropPathConfig:
    p: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"drop-path probability must lie in [0, 1), got {self.p}")

    @property
    def active(self) -> bool:
        return self.enabled and self.p > 0


NO_DROP = DropPathConfig(0.0, False)


def _relu_conv_bn(x: Tensor, t: Mapping[str, Tensor]) -> Tensor:
    y = F.conv2d(F.relu(x), t["w"])
    g = t.get("gamma")
    return F.batch_norm(y, g, t.get("beta")) if g is not None else F.batch_norm(y)


class CellNetwork:
    """Stem, stacked cells and classifier over a set of operation parameters.

    Subclasses decide which ``(cell, node, input, op)`` operations exist:
    all of them for the template network, one genotype's for a standalone
    network.
    """

    def __init__(self, layout: NetworkDescription, affine: bool, dtype=np.float64):
        self.layout = layout
        self.affine = affine
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.prims: Dict[PrimKey, PrimitiveParams] = {}
        self.pre: Dict[Tuple[int, int], Dict[str, Tensor]] = {}

    # -------------------------------------------------------------- construction

    def _register(self, prefix: str, tensors: Mapping[str, Tensor]) -> None:
        for k, t in tensors.items():
            self.params[f"{prefix}.{k}"] = t

    def _kernel(self, rng, shape, fan_in) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(self.dtype), requires_grad=True)

    def _norm_params(self, c: int) -> Dict[str, Tensor]:
        if not self.affine:
            return {}
        return {"gamma": Tensor(np.ones(c, dtype=self.dtype), requires_grad=True),
                "beta": Tensor(np.zeros(c, dtype=self.dtype), requires_grad=True)}

    def _build(self, rng: np.random.Generator, op_keys) -> None:
        lay = self.layout
        m = lay.macro
        if m.stem != "cifar":
            raise NotImplementedError("only the cifar stem is implemented; the imagenet stem is a config stub")
        stem = {"w": self._kernel(rng, (lay.stem_channels, m.in_channels, 3, 3), 9 * m.in_channels),
                **self._norm_params(lay.stem_channels)}
        self.stem = stem
        self._register("stem", stem)
        for cell in lay.cells:
            if cell.reduction_prev:
                fr = init_primitive(OpKind.SKIP_CONNECT, cell.c_prev_prev, cell.c_cell, 2, rng,
                                    affine=self.affine, dtype=self.dtype)
                pre0 = fr.tensors
            else:
                pre0 = {"w": self._kernel(rng, (cell.c_cell, cell.c_prev_prev, 1, 1), cell.c_prev_prev),
                        **self._norm_params(cell.c_cell)}
            pre1 = {"w": self._kernel(rng, (cell.c_cell, cell.c_prev, 1, 1), cell.c_prev),
                    **self._norm_params(cell.c_cell)}
            self.pre[(cell.index, 0)] = pre0
            self.pre[(cell.index, 1)] = pre1
            self._register(f"cells.{cell.index}.pre0", pre0)
            self._register(f"cells.{cell.index}.pre1", pre1)
            for node in range(lay.B):
                for inp in range(node + 2):
                    for op in op_keys(cell, node, inp):
                        stride = 2 if cell.reduction and inp < 2 else 1
                        p = init_primitive(op, cell.c_cell, cell.c_cell, stride, rng,
                                           affine=self.affine, dtype=self.dtype)
                        self.prims[(cell.index, node, inp, op)] = p
                        self._register(f"cells.{cell.index}.n{node}.in{inp}.{op.label}", p.tensors)
        c_last = lay.classifier_in
        self.head = {"w": self._kernel(rng, (m.num_classes, c_last), c_last),
                     "b": Tensor(np.zeros(m.num_classes, dtype=self.dtype), requires_grad=True)}
        self._register("head", self.head)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -------------------------------------------------------------- forward pieces

    def _stem(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.stem["w"], padding=1)
        g = self.stem.get("gamma")
        return F.batch_norm(y, g, self.stem.get("beta")) if g is not None else F.batch_norm(y)

    def _preprocess(self, cell, s0: Tensor, s1: Tensor) -> List[Tensor]:
        t0 = self.pre[(cell.index, 0)]
        if cell.reduction_prev:
            h0 = factorized_reduce(s0, t0)
        else:
            h0 = _relu_conv_bn(s0, t0)
        return [h0, _relu_conv_bn(s1, self.pre[(cell.index, 1)])]

    def _branch(self, cell, node: int, inp: int, op: OpKind, x: Tensor) -> Tensor:
        try:
            p = self.prims[(cell.index, node, inp, op)]
        except KeyError:
            raise KeyError(f"no parameters for op {op.label} on input {inp} of node {node + 1} "
                           f"in cell {cell.index}") from None
        return apply_primitive(op, x, p)

    def _head(self, s: Tensor) -> Tensor:
        return F.linear(F.global_avg_pool(s), self.head["w"], self.head["b"])

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        x = np.asarray(x, dtype=self.dtype)
        m = self.layout.macro
        if x.ndim != 4 or x.shape[1:] != (m.in_channels, m.input_size, m.input_size):
            raise ShapeError(f"batch of shape {x.shape} does not match "
                             f"({m.in_channels}, {m.input_size}, {m.input_size}) images")
        return Tensor(x)

    def forward_paths(self, x, paths: PathSample, drop: DropPathConfig = NO_DROP,
                      rng: Optional[np.random.Generator] = None, training: bool = False) -> Tensor:
        """Logits when cell ``c`` computes the nodes ``paths[c]``."""
        lay = self.layout
        if len(paths) != len(lay.cells):
            raise ValueError(f"path sample covers {len(paths)} cells, network has {len(lay.cells)}")
        use_drop = training and drop.active
        if use_drop and rng is None:
            raise ValueError("drop-path during training needs an rng")
        x = self._as_input(x)
        s0 = s1 = self._stem(x)
        for cell, nodes in zip(lay.cells, paths):
            states = self._preprocess(cell, s0, s1)
            for i, node in enumerate(nodes):
                a = self._branch(cell, i, node.in1, node.op1, states[node.in1])
                b = self._branch(cell, i, node.in2, node.op2, states[node.in2])
                if use_drop:
                    a = _drop_path(a, drop.p, rng)
                    b = _drop_path(b, drop.p, rng)
                states.append(F.add(a, b))
            s0, s1 = s1, F.concat(states[2:], axis=1)
        return self._head(s1)

    def replicate(self, g: Genotype) -> PathSample:
        return tuple(g.cell(c.cell_type) for c in self.layout.cells)


def _drop_path(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    keep = (rng.random(x.shape[0]) >= p).astype(x.data.dtype) / (1.0 - p)
    return F.mul_const(x, keep.reshape(-1, 1, 1, 1))


class TemplateNetwork(CellNetwork):
    """Parameters for every (cell instance, node, input, op) combination."""

    def __init__(self, space: SpaceConfig, macro: MacroConfig, seed: int = 0, dtype=np.float64):
        super().__init__(macro_layout(space.B, macro), affine=False, dtype=dtype)
        self.space = space
        self.macro = macro
        self.seed = seed
        self._build(np.random.default_rng(seed), lambda cell, node, inp: space.op_set)

    def forward_relaxed(self, x, weights: Mapping[str, Sequence[Tensor]]) -> Tensor:
        """Logits when every node mixes all (op, input) branches.

        ``weights[cell_type][node]`` is a vector over ``(op, input)`` pairs,
        op-major, of length ``|O| * (node + 2)``.
        """
        lay = self.layout
        ops = self.space.op_set
        x = self._as_input(x)
        s0 = s1 = self._stem(x)
        for cell in lay.cells:
            states = self._preprocess(cell, s0, s1)
            for i in range(lay.B):
                n_in = i + 2
                outs = [self._branch(cell, i, t, op, states[t]) for op in ops for t in range(n_in)]
                states.append(F.weighted_sum(outs, weights[cell.cell_type][i]))
            s0, s1 = s1, F.concat(states[2:], axis=1)
        return self._head(s1)


class StandaloneNetwork(CellNetwork):
    """A single genotype's network, replicated over every cell of each type."""

    def __init__(self, genotype: Genotype, macro: MacroConfig, affine: bool = True,
                 seed: Optional[int] = 0, dtype=np.float64):
        super().__init__(macro_layout(genotype.B, macro), affine=affine, dtype=dtype)
        self.genotype = genotype
        self.macro = macro
        self.paths = self.replicate(genotype)
        if seed is not None:
            self._build(np.random.default_rng(seed), self._used_ops)

    def _used_ops(self, cell, node, inp):
        n = self.genotype.cell(cell.cell_type)[node]
        used = {n.op1} if n.in1 == inp else set()
        if n.in2 == inp:
            used.add(n.op2)
        return sorted(used)

    def forward(self, x) -> Tensor:
        return self.forward_paths(x, self.paths)


# ---------------------------------------------------------------- operations

def init_supernet(space: SpaceConfig, macro: MacroConfig, seed: int = 0, dtype=np.float64) -> TemplateNetwork:
    return TemplateNetwork(space, macro, seed, dtype)


def sample_paths(space: SpaceConfig, macro: MacroConfig, rng: np.random.Generator,
                 share_across_cells: bool = False) -> PathSample:
    """Uniformly drawn node specs for every cell instance.

    With ``share_across_cells`` one draw per (cell type, node) is reused by
    every instance of that cell type.
    """
    lay = macro_layout(space.B, macro)
    if share_across_cells:
        shared = {kind: tuple(uniform_node(space, i, rng) for i in range(space.B)) for kind in CELL_TYPES}
        return tuple(shared[c.cell_type] for c in lay.cells)
    return tuple(tuple(uniform_node(space, i, rng) for i in range(space.B)) for _ in lay.cells)


def forward_sampled(omega: CellNetwork, paths: PathSample, batch, dropout: DropPathConfig = NO_DROP,
                    training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    x = batch.x if isinstance(batch, Batch) else batch
    return omega.forward_paths(x, paths, dropout, rng, training)


def _check_split(batch: Batch, expected: str, who: str) -> None:
    if isinstance(batch, Batch) and batch.split != expected:
        raise ValueError(f"{who} must only see {expected!r} batches, got one tagged {batch.split!r}")


def train_step_omega(omega: TemplateNetwork, batch: Batch, opt: OptimState, rng: np.random.Generator,
                     variant: str = "setn", lr: Optional[float] = None, dropout: DropPathConfig = DropPathConfig(),
                     clip: float = 10.0, relaxed_weights=None) -> float:
    """One template-parameter update on a training batch; returns the loss.

    ``setn``/``rand``/``t1`` sample independent paths per cell instance,
    ``lr`` shares them across instances, ``non`` uses ``relaxed_weights``.
    """
    _check_split(batch, "train", "template training")
    zero_grad(omega.params)
    if variant == "non":
        if relaxed_weights is None:
            raise ValueError("the 'non' variant needs relaxed_weights from the evaluator")
        logits = omega.forward_relaxed(batch.x, relaxed_weights)
    else:
        paths = sample_paths(omega.space, omega.macro, rng, share_across_cells=(variant == "lr"))
        logits = omega.forward_paths(batch.x, paths, dropout, rng, training=True)
    loss = F.cross_entropy(logits, batch.y)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"template training loss is {value} (variant={variant}, batch of {len(batch)})")
    grads = backward(loss, omega.params)
    sgd_step(omega.params, clip_gradients(grads, clip), opt, lr)
    return value


def evaluate_paths(net: CellNetwork, paths: PathSample, data: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    with no_grad():
        for b in data.batches(batch_size):
            logits = net.forward_paths(b.x, paths)
            total_loss += float(F.cross_entropy(logits, b.y).data) * len(b)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == b.y))
    return total_loss / len(data), correct / len(data)


def evaluate_candidate(omega: CellNetwork, g: Genotype, val_set: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    """One-shot (loss, accuracy) of genotype ``g`` using shared parameters, without mutation."""
    return evaluate_paths(omega, omega.replicate(canonicalize(g)), val_set, batch_size)


def extract_weights(omega: TemplateNetwork, g: Genotype) -> StandaloneNetwork:
    """Copy the parameters genotype ``g`` uses out of the template network."""
    g = canonicalize(g)
    net = StandaloneNetwork(g, omega.macro, affine=False, seed=None, dtype=omega.dtype)

    def copy(t: Mapping[str, Tensor]) -> Dict[str, Tensor]:
        return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in t.items()}

    net.stem = copy(omega.stem)
    net._register("stem", net.stem)
    for cell in net.layout.cells:
        for side in (0, 1):
            net.pre[(cell.index, side)] = copy(omega.pre[(cell.index, side)])
            net._register(f"cells.{cell.index}.pre{side}", net.pre[(cell.index, side)])
        for node in range(net.layout.B):
            for inp in range(node + 2):
                for op in net._used_ops(cell, node, inp):
                    src = omega.prims[(cell.index, node, inp, op)]
                    p = PrimitiveParams(src.kind, src.c_in, src.c_out, src.stride, src.affine, copy(src.tensors))
                    net.prims[(cell.index, node, inp, op)] = p
                    net._register(f"cells.{cell.index}.n{node}.in{inp}.{op.label}", p.tensors)
    net.head = copy(omega.head)
    net._register("head", net.head)
    return net
