"""Candidate quality per generation strategy, scored against scratch training.

Runs a setn search and a rand search with the same seed (their template
networks end up identical, so only candidate generation differs), then
retrains a handful of candidates from each to see which strategy proposes
better architectures.
"""

import numpy as np

from oneshot_nas.data import SyntheticSpec, generate_synthetic_dataset
from oneshot_nas.ndgraph.primitives import OpKind
from oneshot_nas.oracle import (
    RetrainConfig,
    build_truth_table,
    compare_strategies,
    pairwise_agreement,
)
from oneshot_nas.search import SearchConfig, SearchRun, run_search
from oneshot_nas.space import MacroConfig, SpaceConfig

EPOCHS = 15
T = 8


def main():
    ops = (OpKind.MAX_POOL_3X3, OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3)
    base = dict(space=SpaceConfig(2, ops), macro=MacroConfig(N=1, C=8, num_classes=4, input_size=8),
                epochs=EPOCHS, batch_size=32, alpha_batch_size=32, T=T, dtype="float32")
    data = generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=4, samples_per_class=80, noise=0.3), 0)
    setn = run_search(SearchConfig(variant="setn", **base), data)
    rand = run_search(SearchConfig(variant="rand", **base), data)

    split = SearchRun(SearchConfig(**base), data)
    report = compare_strategies({"setn": (setn.omega, setn.alpha), "rand": (rand.omega, None)},
                                split.val, T, np.random.default_rng(1))
    genotypes = [g for s in report.strategies.values() for g in s.genotypes]
    print(f"retraining {len(genotypes)} candidates ...")
    truth = build_truth_table(genotypes, split.train, split.val, base["macro"],
                              RetrainConfig(epochs=10, batch_size=32, lr=0.05, dtype="float32"), seeds=(0,))
    report = compare_strategies({"setn": (setn.omega, setn.alpha), "rand": (rand.omega, None)},
                                split.val, T, np.random.default_rng(1), truth)
    print(report.to_text())

    oneshot = [a for s in report.strategies.values() for a in s.oneshot]
    true = [t for s in report.strategies.values() for t in s.truth]
    print(f"pairwise agreement of one-shot vs scratch accuracy: {pairwise_agreement(oneshot, true):.3f}")


if __name__ == "__main__":
    main()
