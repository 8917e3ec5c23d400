"""Run configuration: INI-style ``[section]`` / ``key = value`` files plus flag overrides.

Sections map one-to-one onto the config dataclasses below.  Unknown sections
or keys are rejected so typos fail loudly.  Units are stated per field:
counts are plain integers, learning rates are per-step Adam step sizes.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from typing import Any

from .data import SynthConfig
from .embedder import EmbedderConfig
from .lm import LmConfig
from .metrics import LABEL_SPACES
from .model import MODES
from .uem import UemConfig

DTYPES = ("float32", "float64")
SOURCES = ("synthetic", "shards")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    mode: str = "embedding"
    dtype: str = "float32"
    log_every: int = 50
    eval_every: int = 0
    checkpoint_every: int = 0
    eval_batch_size: int = 64


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    shards: str = ""
    p: int = 16
    min_views: int = 20
    salt: str = "uem"
    train_frac: float = 0.8
    dev_frac: float = 0.1
    test_frac: float = 0.1
    label_space: str = "both"


SECTIONS: dict[str, type] = {
    "embedder": EmbedderConfig,
    "uem": UemConfig,
    "lm": LmConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "synth": SynthConfig,
}


@dataclass(frozen=True)
class RunConfig:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    uem: UemConfig = field(default_factory=UemConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.data.train_frac, self.data.dev_frac, self.data.test_frac)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def replace(self, **overrides: Any) -> "RunConfig":
        """Override fields by ``section.key`` names, e.g. ``replace(**{"uem.layers": 3})``."""
        return from_dict(self.to_dict(), overrides)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    return str(value)


def from_dict(raw: dict[str, dict[str, Any]], overrides: dict[str, Any] | None = None) -> RunConfig:
    merged = {sec: dict(raw.get(sec, {})) for sec in SECTIONS}
    unknown_sections = set(raw) - set(SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    for key, value in (overrides or {}).items():
        sec, _, name = key.partition(".")
        if sec not in SECTIONS or not name:
            raise ConfigError(f"unknown override {key!r}; use section.key")
        merged[sec][name] = value
    built = {}
    for sec, cls in SECTIONS.items():
        defaults = {f.name: f.default for f in fields(cls)}
        unknown = set(merged[sec]) - set(defaults)
        if unknown:
            raise ConfigError(f"[{sec}] unknown keys: {sorted(unknown)}")
        kwargs = {k: _coerce(v, defaults[k], f"{sec}.{k}") for k, v in merged[sec].items()}
        try:
            built[sec] = cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[{sec}] {exc}") from None
    cfg = RunConfig(**built)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field consistency; raises ``ConfigError`` before any work starts."""
    problems = []
    if cfg.embedder.s != cfg.uem.s:
        problems.append(f"embedder.s={cfg.embedder.s} must equal uem.s={cfg.uem.s}")
    if cfg.uem.e != cfg.lm.e:
        problems.append(f"uem.e={cfg.uem.e} must equal lm.e={cfg.lm.e}")
    if cfg.uem.max_p != cfg.lm.max_p:
        problems.append(f"uem.max_p={cfg.uem.max_p} must equal lm.max_p={cfg.lm.max_p}")
    if cfg.data.p < 0:
        problems.append("data.p must be >= 0")
    if cfg.train.mode == "embedding" and cfg.data.p > cfg.uem.max_p:
        problems.append(f"data.p={cfg.data.p} exceeds uem.max_p={cfg.uem.max_p}")
    if cfg.train.mode not in MODES:
        problems.append(f"train.mode must be one of {MODES}")
    if cfg.train.dtype not in DTYPES:
        problems.append(f"train.dtype must be one of {DTYPES}")
    if cfg.train.lr < 0:
        problems.append("train.lr must be >= 0")
    if cfg.train.steps < 0 or cfg.train.batch_size < 1 or cfg.train.eval_batch_size < 1:
        problems.append("train.steps must be >= 0 and batch sizes >= 1")
    if min(cfg.train.log_every, cfg.train.eval_every, cfg.train.checkpoint_every) < 0:
        problems.append("train.*_every must be >= 0")
    if cfg.data.source not in SOURCES:
        problems.append(f"data.source must be one of {SOURCES}")
    if cfg.data.source == "shards" and not cfg.data.shards:
        problems.append("data.source=shards requires data.shards")
    fr = cfg.fractions
    if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        problems.append(f"data fractions {fr} must be non-negative and sum to 1")
    if cfg.data.label_space not in LABEL_SPACES:
        problems.append(f"data.label_space must be one of {LABEL_SPACES}")
    if cfg.data.min_views < 0:
        problems.append("data.min_views must be >= 0")
    if problems:
        raise ConfigError("; ".join(problems))


def loads(text: str, overrides: dict[str, Any] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    raw = {sec: dict(parser[sec]) for sec in parser.sections()}
    return from_dict(raw, overrides)


def load(path, overrides: dict[str, Any] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read(), overrides)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dumps(cfg: RunConfig) -> str:
    out = io.StringIO()
    for sec, values in cfg.to_dict().items():
        out.write(f"[{sec}]\n")
        for k, v in values.items():
            out.write(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n")
        out.write("\n")
    return out.getvalue()
