"""Experiment configuration and its INI-style file format.

A config file has three sections::

    [experiment]
    method = fedprotokd
    clients = 10
    rounds = 50
    seed = 0

    [data]
    source = synthetic
    partition = dirichlet
    alpha = 0.1

    [hyperparameters]
    zeta = 50

Any key left out takes its default; the hyperparameter defaults are the
published settings where those exist.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError, ParseError

METHODS = ("fedprotokd", "fedprotokd_zeta", "fedpkd_weightedavg", "fedproto_plainavg")
PARTITIONS = ("dirichlet", "pathological")
SOURCES = ("synthetic", "csv")
SECTIONS = ("experiment", "data", "hyperparameters")


@dataclass
class ExperimentConfig:
    # [experiment]
    method: str = "fedprotokd"
    clients: int = 10
    rounds: int = 50
    seed: int = 0
    seeds: tuple[int, ...] = ()
    workers: int = 1
    audit: bool = False

    # [data]
    source: str = "synthetic"
    path: str = ""
    classes: int = 10
    features: int = 16
    n_per_class: int = 600
    spread: float = 1.0
    separation: float = 3.0
    test_fraction: float = 0.2
    public_n: int = 2500
    partition: str = "dirichlet"
    alpha: float = 0.1
    k_classes: int = 3

    # [hyperparameters]
    ep_c: int = 5
    ep_s: int = 10
    ep_tsp: int = 100
    ep_distill: int = 1
    bs: int = 32
    bs_tsp: int = 32
    zeta: float = 50.0
    feature_dim: int = 8
    upsilon: float = 0.5
    epsilon: float = 0.5
    eta: float = 0.5
    phi: float = 0.8
    k_steepness: float = 10.0
    epsilon_guard: float = 1e-8
    lr_client: float = 0.01
    lr_server: float = 0.01
    lr_tsp: float = 0.01
    momentum: float = 0.9

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method: unknown method {self.method!r}, expected one of {METHODS}")
        if self.partition not in PARTITIONS:
            raise ConfigurationError(f"partition: expected one of {PARTITIONS}, got {self.partition!r}")
        if self.source not in SOURCES:
            raise ConfigurationError(f"source: expected one of {SOURCES}, got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigurationError("path: required when source = csv")
        positive = ("clients", "rounds", "workers", "classes", "features", "n_per_class", "public_n",
                    "k_classes", "bs", "bs_tsp", "feature_dim")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("ep_c", "ep_s", "ep_tsp", "ep_distill"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("phi", "upsilon", "eta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name}: must lie in [0, 1], got {value}")
        for name in ("zeta", "alpha", "separation", "k_steepness", "epsilon_guard",
                     "lr_client", "lr_server", "lr_tsp"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.spread < 0 or self.epsilon < 0:
            raise ConfigurationError("spread and epsilon must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction: must lie in (0, 1), got {self.test_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.clients < 2:
            raise ConfigurationError("clients: need at least 2 clients")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @property
    def seed_list(self) -> tuple[int, ...]:
        return self.seeds or (self.seed,)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            parser.add_section(section)
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            elif isinstance(value, tuple):
                text = ", ".join(str(v) for v in value)
            else:
                text = str(value)
            parser.set(_SECTION_OF[f.name], f.name, text)
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _section_map() -> dict[str, str]:
    names = [f.name for f in fields(ExperimentConfig)]
    exp_end = names.index("source")
    data_end = names.index("ep_c")
    out = {}
    for i, name in enumerate(names):
        out[name] = "experiment" if i < exp_end else "data" if i < data_end else "hyperparameters"
    return out


_SECTION_OF = _section_map()
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
# Accepted spellings for a few keys.
_ALIASES = {"K": "feature_dim"}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(text)
            return lowered in ("true", "yes", "1")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(int(part) for part in text.replace(",", " ").split())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return text


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc}") from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]")
    missing = [s for s in SECTIONS if not parser.has_section(s)]
    if missing:
        raise ConfigurationError(f"missing required section(s): {', '.join('[' + s + ']' for s in missing)}")
    values = {}
    for section in SECTIONS:
        for raw_key, raw_value in parser.items(section):
            key = _ALIASES.get(raw_key, raw_key)
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"unknown key {raw_key!r} in [{section}]")
            if _SECTION_OF[key] != section:
                raise ConfigurationError(f"key {raw_key!r} belongs in [{_SECTION_OF[key]}], not [{section}]")
            values[key] = _convert(key, raw_value)
    return ExperimentConfig(**values)


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(config.to_ini())
