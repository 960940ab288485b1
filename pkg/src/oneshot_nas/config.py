"""Run configuration files: sectioned key-value text read with configparser.

Sections and keys::

    [space]   B, ops (comma-separated op names), convention
    [macro]   N, C, num_classes, input_size, in_channels, stem
    [search]  any SearchConfig field except space/macro/seed
    [oracle]  any RetrainConfig field, plus seeds (comma-separated) and limit
    [data]    source (synthetic | cifar10), cifar_dir, and SyntheticSpec fields, seed
    [output]  dir
    [run]     seed

Unknown sections or keys are rejected; missing keys take defaults.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Tuple

from .data import Dataset, SyntheticSpec, generate_synthetic_dataset, load_cifar10
from .ndgraph.primitives import OpKind
from .oracle import RetrainConfig
from .search import SearchConfig
from .space import MacroConfig, SpaceConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    seeds: Tuple[int, ...] = (0, 1, 2)
    limit: int = 500


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    cifar_dir: str = ""
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data source must be 'synthetic' or 'cifar10', got {self.source!r}")

    def load(self) -> Dataset:
        """The data a search sees; for CIFAR-10 this is the official training set."""
        if self.source == "cifar10":
            return load_cifar10(self.cifar_dir)[0]
        return generate_synthetic_dataset(self.synthetic, self.seed)


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"

    @property
    def seed(self) -> int:
        return self.search.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, search=replace(self.search, seed=seed))


# ---------------------------------------------------------------- value conversion

def _convert(raw: str, default: Any, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_section(section, cls, skip=(), extra: Dict[str, Any] = None, name: str = "") -> Tuple[Any, Dict]:
    """Build ``cls`` from a section; keys listed in ``extra`` are returned separately."""
    extra = dict(extra or {})
    defaults = cls()
    allowed = {f.name: getattr(defaults, f.name) for f in fields(cls) if f.name not in skip}
    kwargs, others = {}, {}
    for key, raw in section.items():
        if key in allowed:
            kwargs[key] = _convert(raw, allowed[key], f"[{name}] {key}")
        elif key in extra:
            others[key] = _convert(raw, extra[key], f"[{name}] {key}") if extra[key] is not None else raw.strip()
        else:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
    return kwargs, others


SECTIONS = ("space", "macro", "search", "oracle", "data", "output", "run")


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for s in cp.sections():
        if s not in SECTIONS:
            raise ConfigError(f"unknown section [{s}]")
    sec = {s: cp[s] if cp.has_section(s) else {} for s in SECTIONS}

    kw, extra = _read_section(sec["space"], SpaceConfig, skip=("op_set",), extra={"ops": None}, name="space")
    if "ops" in extra:
        try:
            kw["op_set"] = tuple(OpKind.from_label(o.strip()) for o in extra["ops"].split(",") if o.strip())
        except ValueError as exc:
            raise ConfigError(f"[space] ops: {exc}") from None
    try:
        space = SpaceConfig(**kw)
        mkw = _read_section(sec["macro"], MacroConfig, name="macro")[0]
        kw, _ = _read_section(sec["run"], _RunSection, name="run")
        seed = kw.get("seed", 0)
        skw, _ = _read_section(sec["search"], SearchConfig, skip=("space", "macro", "seed"), name="search")
        rkw, oextra = _read_section(sec["oracle"], RetrainConfig, extra={"seeds": (0,), "limit": 0}, name="oracle")
        oracle = OracleConfig(RetrainConfig(**rkw), **oextra)
        dkw, dextra = _read_section(sec["data"], SyntheticSpec,
                                    extra={"source": "", "cifar_dir": "", "seed": 0}, name="data")
        # a class count stated on one side carries over to the other
        if dextra.get("source", "synthetic") == "synthetic":
            if "num_classes" in mkw:
                dkw.setdefault("num_classes", mkw["num_classes"])
            else:
                mkw["num_classes"] = dkw.get("num_classes", SyntheticSpec().num_classes)
        data = DataConfig(synthetic=SyntheticSpec(**dkw), **dextra)
        macro = MacroConfig(**mkw)
        search = SearchConfig(space=space, macro=macro, seed=seed, **skw)
        okw, _ = _read_section(sec["output"], _OutputSection, name="output")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    if data.source == "cifar10":
        path = os.path.join(base_dir, data.cifar_dir) if data.cifar_dir else ""
        if not path or not os.path.isdir(path):
            raise ConfigError(f"[data] cifar_dir {data.cifar_dir!r} does not exist")
        data = replace(data, cifar_dir=path)
        if macro.num_classes != 10:
            raise ConfigError("[macro] num_classes must be 10 for cifar10")
    elif data.synthetic.num_classes != macro.num_classes:
        raise ConfigError(f"[macro] num_classes={macro.num_classes} but [data] num_classes="
                          f"{data.synthetic.num_classes}")
    return RunConfig(search, oracle, data, okw.get("dir", "runs"))


@dataclass(frozen=True)
class _RunSection:
    seed: int = 0


@dataclass(frozen=True)
class _OutputSection:
    dir: str = "runs"


def load_config(path: str) -> RunConfig:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file {path} not found")
    with open(path) as fh:
        return parse_config(fh.read(), os.path.dirname(os.path.abspath(path)))


def serialize_config(cfg: RunConfig) -> str:
    """Full text form with every key spelled out; parses back to an equal config."""
    s = cfg.search
    secs: Dict[str, Dict[str, str]] = {
        "space": {"B": _format(s.space.B), "ops": ",".join(OpKind(o).label for o in s.space.op_set),
                  "convention": s.space.convention},
        "macro": {f.name: _format(getattr(s.macro, f.name)) for f in fields(MacroConfig)},
        "search": {f.name: _format(getattr(s, f.name)) for f in fields(SearchConfig)
                   if f.name not in ("space", "macro", "seed")},
        "oracle": {**{f.name: _format(getattr(cfg.oracle.retrain, f.name)) for f in fields(RetrainConfig)},
                   "seeds": _format(cfg.oracle.seeds), "limit": _format(cfg.oracle.limit)},
        "data": {"source": cfg.data.source, "cifar_dir": cfg.data.cifar_dir,
                 **{f.name: _format(getattr(cfg.data.synthetic, f.name)) for f in fields(SyntheticSpec)},
                 "seed": _format(cfg.data.seed)},
        "output": {"dir": cfg.output_dir},
        "run": {"seed": _format(s.seed)},
    }
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_dict(secs)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
