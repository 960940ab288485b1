"""Command-line entry point: ``oneshot-nas <subcommand> ...``.

Errors go to stderr as ``error[<kind>]: <message>`` with kind one of
``usage``, ``config``, ``data``, ``checkpoint``, ``genotype``, ``space``,
``runtime``. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration problem (including a missing config file).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, serialize_config
from .data import DatasetError
from .ndgraph.primitives import ENLARGED_OPS, OpKind
from .oracle import (
    TruthTable,
    accuracy_histogram,
    build_truth_table,
    compare_strategies,
    exhaustive_ground_truth,
    retrain_from_scratch,
)
from .search import SearchResult, SearchRun, resume, run_search, split_dataset
from .space import (
    GenotypeParseError,
    SpaceConfig,
    SpaceTooLarge,
    count_candidates,
    parse_genotype,
    serialize_genotype,
    uniform_genotype,
)
from .supernet import evaluate_candidate


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message, 2)


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise CliError("config", str(exc), 2)
    except ConfigError as exc:
        raise CliError("config", str(exc), 2)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_genotype(path: str):
    try:
        with open(path) as fh:
            return parse_genotype(fh.read())
    except OSError as exc:
        raise CliError("genotype", f"cannot read {path}: {exc.strerror}")


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def render_result(res: SearchResult, num_bins: int = 10) -> str:
    d = res.to_dict()
    lines = [
        f"variant       {d['variant']}",
        f"seed          {d['seed']}",
        f"epochs        {d['epochs']}",
        f"omega_steps   {d['omega_steps']}",
        f"alpha_steps   {d['alpha_steps']}",
        f"candidates    {len(d['candidates'])}" + ("  (shortfall)" if d["shortfall"] else ""),
        f"best_loss     {d['best_loss']:.6f}",
        f"best_accuracy {d['best_accuracy']:.6f}",
        "",
        "best genotype",
        serialize_genotype(res.best).rstrip("\n"),
        "",
        "one-shot accuracy histogram",
        accuracy_histogram([c.accuracy for c in res.candidates], num_bins).to_text().rstrip("\n"),
        "",
        f"{'rank':>4}  {'loss':>9}  {'accuracy':>8}  genotype",
    ]
    for k, c in enumerate(sorted(res.candidates, key=lambda c: c.loss), start=1):
        flat = " | ".join(serialize_genotype(c.genotype).strip().splitlines())
        lines.append(f"{k:>4}  {c.loss:>9.5f}  {c.accuracy:>8.4f}  {flat}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- subcommands

def cmd_search(args) -> int:
    cfg = _config(args)
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    data = cfg.data.load()
    ckpt = os.path.join(out, "checkpoint.npz")
    search_cfg = cfg.search if args.variant is None else replace(cfg.search, variant=args.variant)
    if args.resume:
        res = resume(ckpt, data)
    else:
        res = run_search(search_cfg, data, checkpoint=ckpt, checkpoint_every=args.checkpoint_every)
    _write(os.path.join(out, "result.json"), res.to_json())
    _write(os.path.join(out, "best.genotype"), serialize_genotype(res.best))
    _write(os.path.join(out, "report.txt"), render_result(res))
    _write(os.path.join(out, "run.json"), json.dumps({"wall_clock_seconds": res.wall_clock}) + "\n")
    _write(os.path.join(out, "config.ini"), serialize_config(replace(cfg, search=search_cfg)))
    print(f"best one-shot accuracy {res.best_record.accuracy:.6f} loss {res.best_record.loss:.6f}")
    print(serialize_genotype(res.best), end="")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    g = _read_genotype(args.genotype)
    run = SearchRun.load(args.checkpoint, cfg.data.load())
    loss, acc = evaluate_candidate(run.omega, g, run.val, run.cfg.eval_batch_size)
    print(json.dumps({"loss": loss, "accuracy": acc}))
    return 0


def _oracle_split(cfg: RunConfig):
    data = cfg.data.load().astype(np.dtype(cfg.oracle.retrain.dtype))
    return split_dataset(data, cfg.search.split_ratio, cfg.search.split_seed)


def cmd_retrain(args) -> int:
    cfg = _config(args)
    g = _read_genotype(args.genotype)
    train, val = _oracle_split(cfg)
    seeds = cfg.oracle.seeds if args.seed is None else (args.seed,)
    accs = [retrain_from_scratch(g, train, val, cfg.search.macro, cfg.oracle.retrain, s) for s in seeds]
    print(json.dumps({"seeds": list(seeds), "accuracies": accs, "mean": float(np.mean(accs))}))
    return 0


def cmd_truth(args) -> int:
    cfg = _config(args)
    train, val = _oracle_split(cfg)
    o = cfg.oracle
    if args.sample:
        rng = np.random.default_rng([cfg.seed, 4])
        gs = list(dict.fromkeys(uniform_genotype(cfg.search.space, rng) for _ in range(args.sample)))
        table = build_truth_table(gs, train, val, cfg.search.macro, o.retrain, o.seeds)
    else:
        table = exhaustive_ground_truth(cfg.search.space, cfg.search.macro, train, val, o.retrain, o.seeds, o.limit)
    table.save(args.out)
    print(f"wrote {len(table)} entries to {args.out}" + (f" ({len(table.failures)} failed)" if table.failures else ""))
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    data = cfg.data.load()
    runs = {}
    val = None
    for spec in args.run:
        name, _, path = spec.partition("=")
        if not path or name not in ("setn", "lr", "non", "rand"):
            raise CliError("usage", f"--run expects STRATEGY=CHECKPOINT with STRATEGY in setn/lr/non/rand, got {spec!r}", 2)
        run = SearchRun.load(path, data)
        runs[name] = (run.omega, None if name == "rand" else run.alpha)
        val = run.val
    truth = TruthTable.load(args.truth) if args.truth else None
    report = compare_strategies(runs, val, args.T, np.random.default_rng([cfg.seed, 5]), truth, args.bins)
    print(report.to_text(), end="")
    if args.csv:
        _write(args.csv, report.to_csv())
    return 0


def cmd_count(args) -> int:
    if args.ops_list:
        ops = tuple(OpKind.from_label(o.strip()) for o in args.ops_list.split(","))
    else:
        if not 1 <= args.ops <= len(ENLARGED_OPS):
            raise CliError("usage", f"--ops must lie in [1, {len(ENLARGED_OPS)}]", 2)
        ops = ENLARGED_OPS[:args.ops]
    print(count_candidates(SpaceConfig(args.B, ops, args.convention)))
    return 0


def cmd_report(args) -> int:
    with open(args.result) as fh:
        text = fh.read()
    if text.startswith("genotype\t"):
        table = TruthTable.from_text(text)
        accs = [e.mean for e in table.entries.values()]
        print(f"{len(table)} genotypes, mean accuracy {np.mean(accs):.4f}")
        print(accuracy_histogram(accs, args.bins).to_text(), end="")
        return 0
    print(render_result(SearchResult.from_dict(json.loads(text)), args.bins), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oneshot-nas", description="Weight-sharing architecture search with a learned evaluator.")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run a search and write result, genotype, report and checkpoint")
    s.add_argument("config")
    s.add_argument("out", nargs="?", default=None, help="output directory (default: [output] dir)")
    s.add_argument("--variant", choices=("setn", "lr", "non", "rand", "t1"))
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
    s.add_argument("--checkpoint-every", type=int, default=1)
    s.set_defaults(fn=cmd_search)

    s = sub.add_parser("eval", help="one-shot evaluate a genotype file with a search checkpoint")
    s.add_argument("config")
    s.add_argument("genotype")
    s.add_argument("checkpoint")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("retrain", help="train a genotype from scratch")
    s.add_argument("config")
    s.add_argument("genotype")
    s.set_defaults(fn=cmd_retrain)

    s = sub.add_parser("truth", help="build a truth table by scratch retraining")
    s.add_argument("config")
    s.add_argument("out")
    s.add_argument("--sample", type=int, default=0, help="retrain this many uniform samples instead of every genotype")
    s.set_defaults(fn=cmd_truth)

    s = sub.add_parser("compare", help="candidate quality per generation strategy")
    s.add_argument("config")
    s.add_argument("--run", action="append", required=True, metavar="STRATEGY=CHECKPOINT")
    s.add_argument("--T", type=int, default=50)
    s.add_argument("--truth")
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--csv")
    s.set_defaults(fn=cmd_compare)

    s = sub.add_parser("count", help="size of a search space")
    s.add_argument("--B", type=int, default=4)
    s.add_argument("--ops", type=int, default=6, help="use the first K op kinds")
    s.add_argument("--ops-list", default=None, help="comma-separated op names instead of --ops")
    s.add_argument("--convention", choices=("distinct", "canonical"), default="distinct")
    s.set_defaults(fn=cmd_count)

    s = sub.add_parser("report", help="render a result.json or truth table")
    s.add_argument("result")
    s.add_argument("--bins", type=int, default=10)
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except (CheckpointError,) as exc:
        kind, code, msg = "checkpoint", 1, str(exc)
    except DatasetError as exc:
        kind, code, msg = "data", 1, str(exc)
    except GenotypeParseError as exc:
        kind, code, msg = "genotype", 1, str(exc)
    except SpaceTooLarge as exc:
        kind, code, msg = "space", 1, str(exc)
    except (OSError, ValueError, FloatingPointError) as exc:
        kind, code, msg = "runtime", 1, str(exc)
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
