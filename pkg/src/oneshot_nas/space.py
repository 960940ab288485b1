"""Discrete cell search space: genotypes, pair encoding, counting, enumeration, macro layout."""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .ndgraph.primitives import STANDARD_OPS, OpKind

CELL_TYPES = ("normal", "reduction")


class GenotypeParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SpaceTooLarge(ValueError):
    def __init__(self, count: int, limit: int):
        self.count = count
        super().__init__(f"search space holds {count} genotypes, above the limit of {limit}")


@dataclass(frozen=True, order=True)
class NodeSpec:
    """One node: ``op1(input in1) + op2(input in2)``.

    Inputs index ``[cell c-2, cell c-1, node 1, node 2, ...]``.
    """

    in1: int
    in2: int
    op1: OpKind
    op2: OpKind

    def __post_init__(self):
        object.__setattr__(self, "op1", OpKind(self.op1))
        object.__setattr__(self, "op2", OpKind(self.op2))

    def canonical(self) -> "NodeSpec":
        a, b = (self.op1, self.in1), (self.op2, self.in2)
        if b > a:
            a, b = b, a
        return NodeSpec(a[1], b[1], a[0], b[0])

    def is_canonical(self) -> bool:
        return (self.op1, self.in1) >= (self.op2, self.in2)


@dataclass(frozen=True)
class Genotype:
    normal: Tuple[NodeSpec, ...]
    reduction: Tuple[NodeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(self.normal))
        object.__setattr__(self, "reduction", tuple(self.reduction))
        if len(self.normal) != len(self.reduction):
            raise ValueError("normal and reduction cells must have the same number of nodes")
        for cell in (self.normal, self.reduction):
            for i, node in enumerate(cell):
                if not (0 <= node.in1 < i + 2 and 0 <= node.in2 < i + 2):
                    raise ValueError(f"node {i + 1} input index out of range: {node}")

    @property
    def B(self) -> int:
        return len(self.normal)

    def cell(self, cell_type: str) -> Tuple[NodeSpec, ...]:
        return self.normal if cell_type == "normal" else self.reduction

    def is_canonical(self) -> bool:
        return all(n.is_canonical() for n in self.normal + self.reduction)

    def sort_key(self) -> tuple:
        return tuple((n.in1, n.in2, int(n.op1), int(n.op2)) for n in self.normal + self.reduction)

    def __str__(self) -> str:
        return serialize_genotype(self)


@dataclass(frozen=True)
class SpaceConfig:
    B: int = 4
    op_set: Tuple[OpKind, ...] = STANDARD_OPS
    convention: str = "distinct"  # "distinct" | "canonical"

    def __post_init__(self):
        ops = tuple(OpKind(o) for o in self.op_set)
        if self.B < 1:
            raise ValueError("B must be at least 1")
        if not ops or len(set(ops)) != len(ops):
            raise ValueError("op_set must be non-empty with unique entries")
        if self.convention not in ("distinct", "canonical"):
            raise ValueError(f"unknown counting convention {self.convention!r}")
        # positions in op_set follow the canonical op order
        object.__setattr__(self, "op_set", tuple(sorted(ops)))

    @property
    def num_ops(self) -> int:
        return len(self.op_set)

    @property
    def num_pairs(self) -> int:
        return self.num_ops * (self.num_ops + 1) // 2

    def num_inputs(self, node: int) -> int:
        """Candidate inputs for 0-based ``node``."""
        return node + 2

    def position(self, op: OpKind) -> int:
        return self.op_set.index(OpKind(op))


@dataclass(frozen=True)
class MacroConfig:
    N: int = 2
    C: int = 16
    num_classes: int = 10
    input_size: int = 32
    in_channels: int = 3
    stem: str = "cifar"

    def __post_init__(self):
        if self.N < 1 or self.C < 1:
            raise ValueError("N and C must be at least 1")
        if self.stem not in ("cifar", "imagenet"):
            raise ValueError(f"unknown stem {self.stem!r}")


# ---------------------------------------------------------------- function-pair index

def decode_function_pair(r: int, size_o: int) -> Tuple[int, int]:
    """Map a 1-based pair index to ``(r1, r2)`` with ``1 <= r2 <= r1 <= size_o``."""
    total = size_o * (size_o + 1) // 2
    if not 1 <= r <= total:
        raise ValueError(f"pair index {r} outside [1, {total}]")
    r1 = math.isqrt(8 * r)
    r1 = max(1, (r1 - 1) // 2)
    while r1 * (r1 + 1) // 2 < r:
        r1 += 1
    while r1 > 1 and (r1 - 1) * r1 // 2 >= r:
        r1 -= 1
    return r1, r - r1 * (r1 - 1) // 2


def encode_function_pair(r1: int, r2: int) -> int:
    if not 1 <= r2 <= r1:
        raise ValueError(f"need 1 <= r2 <= r1, got r1={r1}, r2={r2}")
    return r1 * (r1 - 1) // 2 + r2


def ordered_uniform_sample_ops(size_o: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Uniform ordered function pair, 1-based, first index >= second."""
    r = int(rng.integers(size_o * (size_o + 1) // 2)) + 1
    return decode_function_pair(r, size_o)


def uniform_sample_inputs(size_i: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Two input indices drawn independently with replacement."""
    if size_i < 1:
        raise ValueError("need at least one candidate input")
    a, b = rng.integers(size_i, size=2)
    return int(a), int(b)


def uniform_node(space: SpaceConfig, node: int, rng: np.random.Generator) -> NodeSpec:
    in1, in2 = uniform_sample_inputs(space.num_inputs(node), rng)
    r1, r2 = ordered_uniform_sample_ops(space.num_ops, rng)
    return NodeSpec(in1, in2, space.op_set[r1 - 1], space.op_set[r2 - 1])


def uniform_genotype(space: SpaceConfig, rng: np.random.Generator) -> Genotype:
    cells = [tuple(uniform_node(space, i, rng) for i in range(space.B)) for _ in CELL_TYPES]
    return canonicalize(Genotype(*cells))


# ---------------------------------------------------------------- canonical form

def canonicalize(g: Genotype) -> Genotype:
    """Order each node's operands so ``(op1, in1) >= (op2, in2)``."""
    return Genotype(tuple(n.canonical() for n in g.normal), tuple(n.canonical() for n in g.reduction))


# ---------------------------------------------------------------- counting and enumeration

def _node_choices(space: SpaceConfig, node: int, convention: str) -> List[NodeSpec]:
    pairs = [(op, inp) for op in space.op_set for inp in range(space.num_inputs(node))]
    out = []
    if convention == "canonical":
        for a, b in itertools.combinations_with_replacement(pairs, 2):
            out.append(NodeSpec(a[1], b[1], a[0], b[0]).canonical())
    else:
        for hi, lo in itertools.combinations(range(space.num_inputs(node)), 2):
            for op_a in space.op_set:
                for op_b in space.op_set:
                    out.append(NodeSpec(lo, hi, op_a, op_b).canonical())
    return sorted(out)


def count_candidates(space: SpaceConfig, convention: str | None = None) -> int:
    """Exact number of genotypes under the chosen counting convention."""
    convention = convention or space.convention
    o = space.num_ops
    per_cell = 1
    for i in range(1, space.B + 1):
        if convention == "distinct":
            per_cell *= math.comb(i + 1, 2) * o ** 2
        elif convention == "canonical":
            m = o * (i + 1)
            per_cell *= m * (m + 1) // 2
        else:
            raise ValueError(f"unknown counting convention {convention!r}")
    return per_cell ** 2


def enumerate_space(space: SpaceConfig, limit: int = 100_000, convention: str | None = None) -> Iterator[Genotype]:
    """Yield every genotype once, in lexicographic order of canonical nodes."""
    convention = convention or space.convention
    total = count_candidates(space, convention)
    if total > limit:
        raise SpaceTooLarge(total, limit)
    per_node = [_node_choices(space, i, convention) for i in range(space.B)]
    cells = list(itertools.product(*per_node))
    for normal in cells:
        for reduction in cells:
            yield Genotype(normal, reduction)


# ---------------------------------------------------------------- macro skeleton

@dataclass(frozen=True)
class CellLayout:
    index: int
    cell_type: str
    c_prev_prev: int
    c_prev: int
    c_cell: int
    reduction_prev: bool
    in_size: int
    out_size: int

    @property
    def reduction(self) -> bool:
        return self.cell_type == "reduction"


@dataclass(frozen=True)
class NetworkDescription:
    """Static layout of the stacked network built around a cell pair."""

    macro: MacroConfig
    B: int
    stem_channels: int
    cells: Tuple[CellLayout, ...]
    classifier_in: int
    genotype: Genotype | None = field(default=None, compare=False)

    def cells_of(self, cell_type: str) -> List[CellLayout]:
        return [c for c in self.cells if c.cell_type == cell_type]


def _halve(n: int) -> int:
    return (n + 1) // 2


def macro_layout(B: int, macro: MacroConfig) -> NetworkDescription:
    """Stem, then ``N`` normal cells per stage with a reduction cell between stages."""
    if macro.input_size < 4:
        raise ValueError(f"input size {macro.input_size} is too small for two downsamplings")
    stem_c = 3 * macro.C
    size = macro.input_size
    if macro.stem == "imagenet":
        size = _halve(_halve(_halve(size)))
        if size < 4:
            raise ValueError(f"input size {macro.input_size} is too small for the imagenet stem")
    c_pp, c_p, c_cell = stem_c, stem_c, macro.C
    kinds = (["normal"] * macro.N + ["reduction"]) * 2 + ["normal"] * macro.N
    cells = []
    reduction_prev = False
    for idx, kind in enumerate(kinds):
        red = kind == "reduction"
        if red:
            c_cell *= 2
        out_size = _halve(size) if red else size
        cells.append(CellLayout(idx, kind, c_pp, c_p, c_cell, reduction_prev, size, out_size))
        c_pp, c_p = c_p, B * c_cell
        size = out_size
        reduction_prev = red
    return NetworkDescription(macro, B, stem_c, tuple(cells), c_p)


def build_macro(g: Genotype, m: MacroConfig) -> NetworkDescription:
    """Network description for genotype ``g`` stacked per ``m``."""
    d = macro_layout(g.B, m)
    return NetworkDescription(d.macro, d.B, d.stem_channels, d.cells, d.classifier_in, g)


# ---------------------------------------------------------------- text format

def serialize_genotype(g: Genotype) -> str:
    lines = []
    for kind in CELL_TYPES:
        lines.append(f"{kind}:")
        for i, n in enumerate(g.cell(kind), start=1):
            lines.append(f"node {i}: ({n.op1.label},{n.in1})+({n.op2.label},{n.in2})")
    return "\n".join(lines) + "\n"


def parse_genotype(text: str) -> Genotype:
    node_re = re.compile(r"^node\s+(\d+)\s*:\s*\(\s*([\w]+)\s*,\s*(-?\d+)\s*\)\s*\+\s*\(\s*([\w]+)\s*,\s*(-?\d+)\s*\)$")
    cells = {k: [] for k in CELL_TYPES}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.rstrip(":") in CELL_TYPES and line.endswith(":"):
            current = line[:-1]
            continue
        m = node_re.match(line)
        if m is None:
            raise GenotypeParseError(f"cannot parse {line!r}", lineno)
        if current is None:
            raise GenotypeParseError("node line before any 'normal:' or 'reduction:' header", lineno)
        idx = int(m.group(1))
        if idx != len(cells[current]) + 1:
            raise GenotypeParseError(f"expected node {len(cells[current]) + 1}, found node {idx}", lineno)
        ops = []
        for token in (m.group(2), m.group(4)):
            try:
                ops.append(OpKind.from_label(token))
            except ValueError:
                raise GenotypeParseError(f"unknown op name {token!r}", lineno) from None
        ins = int(m.group(3)), int(m.group(5))
        for v in ins:
            if not 0 <= v < idx + 1:
                raise GenotypeParseError(f"input index {v} out of range for node {idx}", lineno)
        cells[current].append(NodeSpec(ins[0], ins[1], ops[0], ops[1]))
    if not cells["normal"] or len(cells["normal"]) != len(cells["reduction"]):
        raise GenotypeParseError("need equally many, and at least one, normal and reduction nodes")
    return Genotype(tuple(cells["normal"]), tuple(cells["reduction"]))


def genotype_nodes(g: Genotype) -> Sequence[NodeSpec]:
    return g.normal + g.reduction
