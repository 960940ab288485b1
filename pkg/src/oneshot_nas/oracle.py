"""Ground truth for judging one-shot rankings: scratch retraining and rank statistics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset
from .evaluator import EvaluatorParams, sample_top_candidates
from .ndgraph import functional as F
from .ndgraph.optim import clip_gradients, cosine_lr, sgd_state, sgd_step
from .ndgraph.tensor import backward, no_grad, zero_grad
from .space import (
    Genotype,
    MacroConfig,
    SpaceConfig,
    SpaceTooLarge,
    canonicalize,
    count_candidates,
    enumerate_space,
    parse_genotype,
    serialize_genotype,
    uniform_genotype,
)
from .supernet import NonFiniteLoss, StandaloneNetwork, TemplateNetwork, evaluate_candidate


class RetrainDiverged(NonFiniteLoss):
    def __init__(self, genotype: Genotype, step: int, value: float):
        super().__init__(f"retraining diverged at step {step} (loss {value}) for {genotype_to_line(genotype)}")
        self.genotype = genotype
        self.step = step


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    clip: float = 10.0
    eval_batch_size: int = 256
    dtype: str = "float64"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


def genotype_to_line(g: Genotype) -> str:
    """Single-line genotype text: the usual lines joined by ``|``."""
    return "|".join(serialize_genotype(g).strip().splitlines())


def genotype_from_line(line: str) -> Genotype:
    return parse_genotype(line.replace("|", "\n"))


# ---------------------------------------------------------------- retraining

def retrain_from_scratch(g: Genotype, train: Dataset, test: Dataset, macro: MacroConfig,
                         cfg: RetrainConfig = RetrainConfig(), seed: int = 0) -> float:
    """Train ``g`` from a fresh initialization on ``train``; return accuracy on ``test``."""
    dtype = np.dtype(cfg.dtype)
    train, test = train.astype(dtype), test.astype(dtype)
    net = StandaloneNetwork(canonicalize(g), macro, affine=True, seed=seed, dtype=dtype)
    opt = sgd_state(cfg.lr, cfg.momentum, cfg.weight_decay)
    bs = min(cfg.batch_size, len(train))
    per_epoch = max(1, len(train) // bs)
    total = cfg.epochs * per_epoch
    rng = np.random.default_rng([seed, 17])
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train))
        for j in range(per_epoch):
            batch = train.batch(order[j * bs:(j + 1) * bs])
            zero_grad(net.params)
            loss = F.cross_entropy(net.forward(batch.x), batch.y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise RetrainDiverged(g, step, value)
            grads = backward(loss, net.params)
            sgd_step(net.params, clip_gradients(grads, cfg.clip), opt, cosine_lr(step, total, cfg.lr))
            step += 1
    correct = 0
    with no_grad():
        for b in test.batches(cfg.eval_batch_size):
            correct += int(np.sum(np.argmax(net.forward(b.x).data, axis=1) == b.y))
    return correct / len(test)


# ---------------------------------------------------------------- truth tables

@dataclass
class TruthEntry:
    accuracies: Tuple[float, ...]
    seeds: Tuple[int, ...]
    epochs: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


@dataclass
class TruthTable:
    """Scratch-trained accuracy per canonical genotype, averaged over seeds."""

    entries: Dict[Genotype, TruthEntry] = field(default_factory=dict)
    failures: Dict[Genotype, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, g: Genotype) -> bool:
        return canonicalize(g) in self.entries

    def __getitem__(self, g: Genotype) -> TruthEntry:
        return self.entries[canonicalize(g)]

    def accuracy(self, g: Genotype) -> float:
        return self[g].mean

    def add(self, g: Genotype, entry: TruthEntry) -> None:
        if not all(0.0 <= a <= 1.0 for a in entry.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")
        self.entries[canonicalize(g)] = entry

    def ranked(self) -> List[Tuple[Genotype, float]]:
        """Genotypes by descending mean accuracy."""
        return sorted(((g, e.mean) for g, e in self.entries.items()), key=lambda t: -t[1])

    def percentile(self, g: Genotype, among: Optional[Iterable[Genotype]] = None) -> float:
        """Fraction of ``among`` (default: the whole table) with truth strictly below ``g``, ties half."""
        a = self.accuracy(g)
        pool = np.array([self.accuracy(h) for h in (among if among is not None else self.entries)])
        return float((np.sum(pool < a) + 0.5 * np.sum(pool == a)) / len(pool))

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["genotype", "mean_accuracy", "std", "epochs", "seeds", "accuracies"])
        for g in sorted(self.entries, key=lambda g: g.sort_key()):
            e = self.entries[g]
            w.writerow([genotype_to_line(g), repr(e.mean), repr(e.std), e.epochs,
                        ",".join(map(str, e.seeds)), ",".join(repr(a) for a in e.accuracies)])
        for g in sorted(self.failures, key=lambda g: g.sort_key()):
            w.writerow([genotype_to_line(g), "nan", "nan", 0, "", "FAILED: " + self.failures[g]])
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "TruthTable":
        rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
        if not rows or rows[0][:2] != ["genotype", "mean_accuracy"]:
            raise ValueError("not a truth table: missing header")
        table = cls()
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != 6:
                raise ValueError(f"line {lineno}: expected 6 fields, got {len(row)}")
            g = genotype_from_line(row[0])
            if row[5].startswith("FAILED: "):
                table.failures[g] = row[5][len("FAILED: "):]
                continue
            accs = tuple(float(a) for a in row[5].split(","))
            seeds = tuple(int(s) for s in row[4].split(","))
            table.add(g, TruthEntry(accs, seeds, int(row[3])))
        return table

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "TruthTable":
        with open(path) as fh:
            return cls.from_text(fh.read())


def build_truth_table(genotypes: Iterable[Genotype], train: Dataset, test: Dataset, macro: MacroConfig,
                      cfg: RetrainConfig = RetrainConfig(), seeds: Sequence[int] = (0, 1, 2),
                      table: Optional[TruthTable] = None,
                      progress: Optional[Callable[[int, Genotype], None]] = None) -> TruthTable:
    """Retrain each genotype once per seed; entries already in ``table`` are kept."""
    table = table if table is not None else TruthTable()
    for k, g in enumerate(dict.fromkeys(canonicalize(g) for g in genotypes)):
        if g in table.entries or g in table.failures:
            continue
        try:
            accs = tuple(retrain_from_scratch(g, train, test, macro, cfg, s) for s in seeds)
        except NonFiniteLoss as exc:
            table.failures[g] = str(exc)
            continue
        table.add(g, TruthEntry(accs, tuple(seeds), cfg.epochs))
        if progress:
            progress(k, g)
    return table


def exhaustive_ground_truth(space: SpaceConfig, macro: MacroConfig, train: Dataset, test: Dataset,
                            cfg: RetrainConfig = RetrainConfig(), seeds: Sequence[int] = (0, 1, 2),
                            limit: int = 500, progress=None) -> TruthTable:
    """Retrain every canonical genotype of a tiny space."""
    total = count_candidates(space, "canonical")
    if total > limit:
        raise SpaceTooLarge(total, limit)
    return build_truth_table(enumerate_space(space, limit, "canonical"), train, test, macro, cfg, seeds,
                             progress=progress)


# ---------------------------------------------------------------- rank statistics

def _pair_signs(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    i, j = np.triu_indices(len(v), k=1)
    return np.sign(v[i] - v[j])


def _check_pair(a: Sequence[float], b: Sequence[float]) -> None:
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("need at least two items to compare rankings")


def pairwise_agreement(oneshot: Sequence[float], truth: Sequence[float]) -> float:
    """Fraction of unordered pairs ordered the same way in both lists; a tie in either gives half credit."""
    _check_pair(oneshot, truth)
    s, t = _pair_signs(oneshot), _pair_signs(truth)
    tied = (s == 0) | (t == 0)
    score = np.where(tied, 0.5, (s == t).astype(float))
    return float(score.mean())


def kendall_tau(oneshot: Sequence[float], truth: Sequence[float]) -> float:
    """Tie-adjusted Kendall rank correlation (tau-b)."""
    _check_pair(oneshot, truth)
    s, t = _pair_signs(oneshot), _pair_signs(truth)
    n0 = len(s)
    n1, n2 = np.sum(s == 0), np.sum(t == 0)
    if n1 == n0 or n2 == n0:
        raise ValueError("kendall tau is undefined when a list has all-equal values")
    return float(np.sum(s * t) / math.sqrt((n0 - n1) * (n0 - n2)))


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_text(self, width: int = 40) -> str:
        peak = max(int(self.counts.max()), 1)
        lines = []
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"[{lo:5.3f}, {hi:5.3f})  {int(c):6d}  {'#' * int(round(width * c / peak))}")
        return "\n".join(lines) + "\n"


def accuracy_histogram(accs: Sequence[float], num_bins: int = 10) -> Histogram:
    """Uniform bins over [0, 1]; a value on an inner edge goes to the upper bin, 1.0 to the last."""
    a = np.asarray(accs, dtype=float)
    if a.size == 0:
        raise ValueError("accuracy_histogram needs at least one value")
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    if np.any((a < 0) | (a > 1)):
        raise ValueError("accuracies must lie in [0, 1]")
    idx = np.minimum(np.floor(a * num_bins).astype(int), num_bins - 1)
    return Histogram(np.linspace(0.0, 1.0, num_bins + 1), np.bincount(idx, minlength=num_bins))


# ---------------------------------------------------------------- strategy comparison

@dataclass
class StrategySummary:
    name: str
    genotypes: List[Genotype]
    oneshot: List[float]
    histogram: Histogram
    shortfall: bool
    truth: Optional[List[Optional[float]]] = None  # None where a genotype has no truth entry

    @property
    def mean_oneshot(self) -> float:
        return float(np.mean(self.oneshot))

    @property
    def mean_truth(self) -> Optional[float]:
        known = [t for t in self.truth or () if t is not None]
        return float(np.mean(known)) if known else None


@dataclass
class StrategyReport:
    strategies: Dict[str, StrategySummary]

    def to_text(self) -> str:
        out = [f"{'strategy':<10} {'n':>5} {'mean_oneshot':>13} {'mean_truth':>11} {'shortfall':>9}"]
        for s in self.strategies.values():
            mt = "-" if s.mean_truth is None else f"{s.mean_truth:.4f}"
            out.append(f"{s.name:<10} {len(s.genotypes):>5} {s.mean_oneshot:>13.4f} {mt:>11} {str(s.shortfall):>9}")
        for s in self.strategies.values():
            out.append("")
            out.append(f"{s.name} one-shot accuracy histogram")
            out.append(s.histogram.to_text().rstrip("\n"))
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "genotype", "oneshot_accuracy", "true_accuracy"])
        for s in self.strategies.values():
            for i, g in enumerate(s.genotypes):
                t = "" if s.truth is None or s.truth[i] is None else repr(s.truth[i])
                w.writerow([s.name, genotype_to_line(g), repr(s.oneshot[i]), t])
        return buf.getvalue()


def strategy_candidates(strategy: str, space: SpaceConfig, alpha: Optional[EvaluatorParams], T: int,
                        rng: np.random.Generator, max_attempts: int = 10_000) -> Tuple[List[Genotype], bool]:
    """Candidates as a strategy generates them: uniform for ``rand``, evaluator sampling otherwise."""
    if strategy == "rand" or alpha is None:
        seen: Dict[Genotype, None] = {}
        attempts = 0
        while len(seen) < T and attempts < max_attempts:
            seen.setdefault(uniform_genotype(space, rng), None)
            attempts += 1
        return list(seen), len(seen) < T
    cs = sample_top_candidates(alpha, T, rng, max_attempts)
    return cs.genotypes, cs.shortfall


def compare_strategies(runs: Mapping[str, Tuple[TemplateNetwork, Optional[EvaluatorParams]]], val: Dataset,
                       T: int, rng: np.random.Generator, truth: Optional[TruthTable] = None,
                       num_bins: int = 10, eval_batch_size: int = 256) -> StrategyReport:
    """One-shot evaluate ``T`` candidates per strategy.

    ``runs`` maps a strategy name (``setn``, ``lr``, ``non``, ``rand``) to its
    trained template network and evaluator (``None`` for ``rand``). Each
    strategy's candidates are scored on its own template network.
    """
    out = {}
    for name, (omega, alpha) in runs.items():
        gs, short = strategy_candidates(name, omega.space, alpha, T, rng)
        accs = [evaluate_candidate(omega, g, val, eval_batch_size)[1] for g in gs]
        tr = None
        if truth is not None:
            tr = [truth.accuracy(g) if g in truth else None for g in gs]
        out[name] = StrategySummary(name, gs, accs, accuracy_histogram(accs, num_bins), short, tr)
    return StrategyReport(out)
