"""The end-to-end search: alternate template and evaluator updates, then pick a candidate."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Dataset, DatasetError
from .evaluator import (
    EvaluatorParams,
    argmax_genotype,
    init_alpha,
    relaxed_weights,
    sample_top_candidates,
    train_step_alpha,
)
from .ndgraph.optim import OptimState, adam_state, cosine_lr, sgd_state
from .ndgraph.primitives import OpKind
from .ndgraph.tensor import Tensor
from .space import Genotype, MacroConfig, SpaceConfig, parse_genotype, serialize_genotype, uniform_genotype
from .supernet import DropPathConfig, TemplateNetwork, evaluate_candidate, init_supernet, train_step_omega

VARIANTS = ("setn", "lr", "non", "rand", "t1")


@dataclass(frozen=True)
class SearchConfig:
    space: SpaceConfig = field(default_factory=SpaceConfig)
    macro: MacroConfig = field(default_factory=MacroConfig)
    epochs: int = 400
    batch_size: int = 64
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    alpha_lr: float = 3e-3
    alpha_weight_decay: float = 1e-3
    alpha_batch_size: int = 64
    clip: float = 10.0
    drop_path: float = 0.1
    split_ratio: float = 0.5
    split_seed: int = 0
    T: int = 1000
    max_attempts: int = 10_000
    variant: str = "setn"
    eval_batch_size: int = 256
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.T < 1 or self.epochs < 1:
            raise ValueError("T and epochs must be at least 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        DropPathConfig(self.drop_path)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["space"]["op_set"] = [OpKind(o).label for o in self.space.op_set]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        sp = dict(d.pop("space"))
        sp["op_set"] = tuple(OpKind.from_label(o) for o in sp["op_set"])
        return cls(space=SpaceConfig(**sp), macro=MacroConfig(**d.pop("macro")), **d)


@dataclass
class CandidateRecord:
    genotype: Genotype
    loss: float
    accuracy: float


@dataclass
class SearchResult:
    best: Genotype
    candidates: List[CandidateRecord]
    variant: str
    seed: int
    epochs: int
    omega_steps: int
    alpha_steps: int
    shortfall: bool
    omega: Optional[TemplateNetwork] = field(default=None, repr=False)
    alpha: Optional[EvaluatorParams] = field(default=None, repr=False)
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0

    @property
    def best_record(self) -> CandidateRecord:
        return next(c for c in self.candidates if c.genotype == self.best)

    def to_dict(self) -> dict:
        """Deterministic summary; excludes wall-clock time and parameter arrays."""
        return {
            "variant": self.variant,
            "seed": self.seed,
            "epochs": self.epochs,
            "omega_steps": self.omega_steps,
            "alpha_steps": self.alpha_steps,
            "shortfall": self.shortfall,
            "best": serialize_genotype(self.best),
            "best_loss": self.best_record.loss,
            "best_accuracy": self.best_record.accuracy,
            "candidates": [{"genotype": serialize_genotype(c.genotype), "loss": c.loss, "accuracy": c.accuracy}
                           for c in self.candidates],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SearchResult":
        cands = [CandidateRecord(parse_genotype(c["genotype"]), c["loss"], c["accuracy"]) for c in d["candidates"]]
        return cls(parse_genotype(d["best"]), cands, d["variant"], d["seed"], d["epochs"],
                   d["omega_steps"], d["alpha_steps"], d["shortfall"])


# ---------------------------------------------------------------- data split

def split_dataset(data: Dataset, ratio: float = 0.5, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Class-stratified disjoint split into ``train`` and ``val`` subsets."""
    if len(data) == 0:
        raise DatasetError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * ratio))
        if k == 0 or k == len(idx):
            raise DatasetError(f"class {c} has {len(idx)} item(s); too few to split at ratio {ratio}")
        train_idx.append(idx[:k])
        val_idx.append(idx[k:])
    return (data.subset(np.sort(np.concatenate(train_idx)), "train"),
            data.subset(np.sort(np.concatenate(val_idx)), "val"))


def data_fingerprint(data: Dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(data.images).tobytes())
    h.update(np.ascontiguousarray(data.labels).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- the search loop

def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


class SearchRun:
    """Mutable state of one search; advances epoch by epoch.

    Random streams are derived from ``(seed, purpose, index)`` so the whole
    run is reproducible from the step counters alone:

    * ``(seed, 0, epoch)``: training-batch order,
    * ``(seed, 1, epoch)``: path sampling and drop-path masks,
    * ``(seed, 2, pass)``: validation-batch order for the evaluator,
    * ``(seed, 3)``: candidate generation.
    """

    def __init__(self, cfg: SearchConfig, data: Dataset):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        data = data.astype(dtype)
        self.fingerprint = data_fingerprint(data)
        self.train, self.val = split_dataset(data, cfg.split_ratio, cfg.split_seed)
        self.omega = init_supernet(cfg.space, cfg.macro, cfg.seed, dtype=dtype)
        self.alpha = init_alpha(cfg.space)
        self.opt_w = sgd_state(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.opt_a = adam_state(cfg.alpha_lr, cfg.alpha_weight_decay)
        self.epoch = 0
        self.omega_steps = 0
        self.alpha_steps = 0
        self.result: Optional[SearchResult] = None
        self.elapsed = 0.0

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.train) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def finished(self) -> bool:
        return self.result is not None

    def _val_batch(self):
        bs = min(self.cfg.alpha_batch_size, len(self.val))
        per_pass = len(self.val) // bs
        p, j = divmod(self.alpha_steps, per_pass)
        order = _stream(self.cfg.seed, 2, p).permutation(len(self.val))
        return self.val.batch(order[j * bs:(j + 1) * bs])

    def run_epoch(self) -> None:
        cfg = self.cfg
        bs = min(cfg.batch_size, len(self.train))
        order = _stream(cfg.seed, 0, self.epoch).permutation(len(self.train))
        rng = _stream(cfg.seed, 1, self.epoch)
        drop = DropPathConfig(cfg.drop_path)
        for j in range(self.steps_per_epoch):
            batch = self.train.batch(order[j * bs:(j + 1) * bs])
            lr = cosine_lr(self.omega_steps, self.total_steps, cfg.lr)
            weights = relaxed_weights(self.alpha, differentiable=False) if cfg.variant == "non" else None
            train_step_omega(self.omega, batch, self.opt_w, rng, cfg.variant, lr=lr, dropout=drop,
                             clip=cfg.clip, relaxed_weights=weights)
            self.omega_steps += 1
            if cfg.variant != "rand":
                train_step_alpha(self.omega, self.alpha, self._val_batch(), self.opt_a, cfg.clip)
                self.alpha_steps += 1
        self.epoch += 1

    def generate_candidates(self) -> Tuple[List[Genotype], bool]:
        cfg = self.cfg
        rng = _stream(cfg.seed, 3)
        if cfg.variant == "t1":
            return [argmax_genotype(self.alpha)], False
        if cfg.variant == "rand":
            seen: dict = {}
            attempts = 0
            while len(seen) < cfg.T and attempts < cfg.max_attempts:
                seen.setdefault(uniform_genotype(cfg.space, rng), None)
                attempts += 1
            return list(seen), len(seen) < cfg.T
        cands = sample_top_candidates(self.alpha, cfg.T, rng, cfg.max_attempts)
        return cands.genotypes, cands.shortfall

    def finish(self) -> SearchResult:
        cands, shortfall = self.generate_candidates()
        log = [CandidateRecord(g, *evaluate_candidate(self.omega, g, self.val, self.cfg.eval_batch_size))
               for g in cands]
        best = min(log, key=lambda c: c.loss)
        self.result = SearchResult(best.genotype, log, self.cfg.variant, self.cfg.seed, self.epoch,
                                   self.omega_steps, self.alpha_steps, shortfall, self.omega, self.alpha)
        return self.result

    # -------------------------------------------------------------- persistence

    def save(self, path: str) -> None:
        arrays = {f"omega/{k}": t.data for k, t in self.omega.params.items()}
        arrays.update({f"alpha/{k}": t.data for k, t in self.alpha.params.items()})
        for tag, opt in (("opt_omega", self.opt_w), ("opt_alpha", self.opt_a)):
            for buf, values in opt.buffers.items():
                arrays.update({f"{tag}/{buf}/{k}": np.asarray(v) for k, v in values.items()})
        meta = {
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "omega_steps": self.omega_steps,
            "alpha_steps": self.alpha_steps,
            "opt_steps": [self.opt_w.step, self.opt_a.step],
            "data_fingerprint": self.fingerprint,
            "rng": {"scheme": "numpy default_rng([seed, stream, index])", "seed": self.cfg.seed},
            "result": self.result.to_dict() if self.result else None,
        }
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: str, data: Dataset) -> "SearchRun":
        meta, arrays = load_checkpoint(path)
        try:
            cfg = SearchConfig.from_dict(meta["config"])
            run = cls(cfg, data)
            if run.fingerprint != meta["data_fingerprint"]:
                raise CheckpointError("checkpoint was written for different data")
            for tag, store in (("omega", run.omega.params), ("alpha", run.alpha.params)):
                for k, t in store.items():
                    arr = arrays[f"{tag}/{k}"]
                    if arr.shape != t.data.shape:
                        raise CheckpointError(f"{tag}/{k} has shape {arr.shape}, expected {t.data.shape}")
                    t.data = arr.astype(t.data.dtype)
            for tag, opt in (("opt_omega", run.opt_w), ("opt_alpha", run.opt_a)):
                for key, arr in arrays.items():
                    if key.startswith(tag + "/"):
                        _, buf, name = key.split("/", 2)
                        opt.buffers.setdefault(buf, {})[name] = arr
            run.opt_w.step, run.opt_a.step = meta["opt_steps"]
            run.epoch = meta["epoch"]
            run.omega_steps = meta["omega_steps"]
            run.alpha_steps = meta["alpha_steps"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing field {exc}") from None
        if meta.get("result"):
            res = SearchResult.from_dict(meta["result"])
            res.omega, res.alpha, res.checkpoint = run.omega, run.alpha, path
            run.result = res
        return run


def _continue(run: SearchRun, checkpoint: Optional[str], checkpoint_every: int,
              stop_after_epoch: Optional[int]) -> SearchResult | SearchRun:
    start = time.perf_counter()
    while run.epoch < run.cfg.epochs:
        run.run_epoch()
        if checkpoint and checkpoint_every and run.epoch % checkpoint_every == 0:
            run.save(checkpoint)
        if stop_after_epoch is not None and run.epoch >= stop_after_epoch and run.epoch < run.cfg.epochs:
            if checkpoint:
                run.save(checkpoint)
            return run
    result = run.finish()
    result.wall_clock = run.elapsed + time.perf_counter() - start
    if checkpoint:
        run.save(checkpoint)
        result.checkpoint = checkpoint
    return result


def run_search(cfg: SearchConfig, data: Dataset, checkpoint: Optional[str] = None, checkpoint_every: int = 1,
               stop_after_epoch: Optional[int] = None):
    """Run the full search on ``data`` (split internally into train/val).

    With ``stop_after_epoch`` the run halts early, saves ``checkpoint`` and
    returns the live :class:`SearchRun`; :func:`resume` continues it.
    """
    return _continue(SearchRun(cfg, data), checkpoint, checkpoint_every, stop_after_epoch)


def resume(checkpoint: str, data: Dataset, checkpoint_every: int = 1) -> SearchResult:
    run = SearchRun.load(checkpoint, data)
    if run.finished:
        return run.result
    return _continue(run, checkpoint, checkpoint_every, None)
