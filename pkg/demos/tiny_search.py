"""A small search on synthetic motifs, then a from-scratch retrain of the winner.

Takes a couple of minutes on one CPU core.
"""

import argparse

from oneshot_nas.cli import render_result
from oneshot_nas.data import SyntheticSpec, generate_synthetic_dataset
from oneshot_nas.ndgraph.primitives import OpKind
from oneshot_nas.oracle import RetrainConfig, retrain_from_scratch
from oneshot_nas.search import SearchConfig, SearchRun, run_search
from oneshot_nas.space import MacroConfig, SpaceConfig


def get_args():
    parser = argparse.ArgumentParser()
    parser.add_argument("--epochs", default=20, type=int)
    parser.add_argument("--T", default=20, type=int, help="candidates drawn from the evaluator")
    parser.add_argument("--variant", default="setn", choices=("setn", "lr", "non", "rand", "t1"))
    parser.add_argument("--seed", default=0, type=int)
    return parser.parse_args()


def main():
    args = get_args()
    ops = (OpKind.MAX_POOL_3X3, OpKind.SKIP_CONNECT, OpKind.SEP_CONV_3X3)
    cfg = SearchConfig(space=SpaceConfig(2, ops), macro=MacroConfig(N=1, C=8, num_classes=4, input_size=8),
                       epochs=args.epochs, batch_size=32, alpha_batch_size=32, T=args.T,
                       variant=args.variant, seed=args.seed, dtype="float32")
    data = generate_synthetic_dataset(SyntheticSpec(image_size=8, num_classes=4, samples_per_class=80, noise=0.3), 0)

    res = run_search(cfg, data)
    print(render_result(res))
    print(f"search took {res.wall_clock:.1f} s")

    # retrain the pick on the same split the search used
    split = SearchRun(cfg, data)
    acc = retrain_from_scratch(res.best, split.train, split.val, cfg.macro,
                               RetrainConfig(epochs=15, batch_size=32, lr=0.05, dtype="float32"), seed=0)
    print(f"retrained from scratch: {acc:.3f} (one-shot said {res.best_record.accuracy:.3f})")


if __name__ == "__main__":
    main()
