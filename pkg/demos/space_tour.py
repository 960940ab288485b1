"""How big the cell search space is, and what a genotype looks like on disk."""

import numpy as np

from oneshot_nas.ndgraph.primitives import STANDARD_OPS
from oneshot_nas.space import (
    SpaceConfig,
    canonicalize,
    count_candidates,
    decode_function_pair,
    parse_genotype,
    serialize_genotype,
    uniform_genotype,
)


def main():
    space = SpaceConfig(B=4, op_set=STANDARD_OPS)
    print("ops:", ", ".join(op.label for op in space.op_set))
    print("distinct-input count, B=4:", count_candidates(space, "distinct"))
    print("with-replacement canonical count, B=4:", count_candidates(space, "canonical"))

    # the 21 ordered function pairs for six ops, first few
    for r in range(1, 6):
        r1, r2 = decode_function_pair(r, space.num_ops)
        print(f"pair index {r}: ({space.op_set[r1 - 1].label}, {space.op_set[r2 - 1].label})")

    g = uniform_genotype(space, np.random.default_rng(0))
    text = serialize_genotype(g)
    print()
    print(text)
    assert parse_genotype(text) == canonicalize(g)


if __name__ == "__main__":
    main()
