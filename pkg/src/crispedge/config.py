"""Flat ``section.key = value`` run configuration.

Values are JSON literals (``0.001``, ``true``, ``[4, 6, 6, 4]``, ``null``);
anything that does not parse as JSON is kept as a bare string. Unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ._validation import ConfigError
from .data import SynthConfig
from .metrics import DEFAULT_SWEEP, EvalConfig
from .networks import NetConfig
from .training import TrainConfig

__all__ = ["DataConfig", "RunConfig", "load_config", "parse_config", "dump_config", "config_keys"]

SEED_ENV = "CEL_SEED"


@dataclass
class DataConfig:
    dataset_dir: str | None = None  # default: <output_dir>/dataset
    nuclei_dir: str | None = None  # Data Science Bowl layout; overrides dataset_dir
    nuclei_size: int = 256
    test_frac: float = 0.2
    name: str = "synthetic"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "run"
    sweep: list = field(default_factory=lambda: list(DEFAULT_SWEEP))
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def resolved(self) -> "RunConfig":
        """Push the top-level seed into the sections that consume one."""
        self.train.seed = self.seed
        self.synth.seed = self.seed
        self.synth.rank = self.net.rank
        return self

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data.dataset_dir) if self.data.dataset_dir else Path(self.output_dir) / "dataset"


_SECTIONS = ("data", "net", "train", "eval", "synth")
# seeds are owned by the top-level key; synth.rank follows net.rank
_HIDDEN = {"train.seed", "synth.seed", "synth.rank", "train.checkpoint_dir"}


def config_keys() -> dict:
    """Every accepted key mapped to its default value."""
    base = RunConfig()
    keys = {f.name: getattr(base, f.name) for f in dataclasses.fields(base) if f.name not in _SECTIONS}
    for sec in _SECTIONS:
        for f in dataclasses.fields(getattr(base, sec)):
            key = f"{sec}.{f.name}"
            if key not in _HIDDEN:
                keys[key] = getattr(getattr(base, sec), f.name)
    return keys


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    known = config_keys()
    items = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        items.append((key, _value(val)))
    items += list((overrides or {}).items())
    for key, val in items:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if "." in key:
            sec, name = key.split(".", 1)
            setattr(getattr(cfg, sec), name, val)
        else:
            setattr(cfg, key, val)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    cfg.resolved()
    cfg.net.validate()
    cfg.train.validate()
    cfg.eval.validate()
    cfg.synth.resolved()
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key in config_keys():
        if "." in key:
            sec, name = key.split(".", 1)
            val = getattr(getattr(cfg, sec), name)
        else:
            val = getattr(cfg, key)
        lines.append(f"{key} = {json.dumps(val)}")
    return "\n".join(lines) + "\n"
