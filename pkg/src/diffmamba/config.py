"""INI-style run configuration with ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, asdict

from .errors import ConfigError


@dataclass
class ModelConfig:
    pattern: str = "mamba"  # mamba | diff | alternating
    depth: int = 2
    d_model: int = 64
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    heads: int = 0  # 0 selects the default grouping
    lambda_mode: str = "simple"
    normalized: bool = True
    fused: bool = True
    shared_out_proj: bool = False
    lambda_init: float | None = None  # None selects the per-layer schedule


@dataclass
class TrainConfig:
    dataset: str = ""
    splits: str = "0.8/0.1/0.1"
    synthetic_bytes: int = 1_000_000  # used when dataset is empty
    max_seq_len: int = 512
    batch_size: int = 8
    lr: float = 2e-3
    warmup_steps: int = 100
    steps: int = 1000
    weight_decay: float = 0.1
    dropout: float = 0.0
    seeds: list = field(default_factory=lambda: [0])
    eval_interval: int = 100
    eval_batch_size: int = 16
    eval_max_bytes: int = 0  # 0 evaluates the full split
    grad_clip: float = 1.0
    min_lr_ratio: float = 0.1
    scan_mode: str = "sequential"

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be nonnegative")
        if self.warmup_steps > self.steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} exceeds steps {self.steps}")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("lr, weight_decay and grad_clip must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_seq_len < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("max_seq_len and batch sizes must be positive")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.scan_mode not in ("sequential", "parallel"):
            raise ConfigError(f"unknown scan_mode {self.scan_mode!r}")
        return self


@dataclass
class NeedleConfig:
    count: int = 200
    lengths: list = field(default_factory=lambda: [64, 128, 256, 512])
    seed: int = 0
    filler: str = ""  # path to filler text; empty uses the synthetic generator
    out: str = "needle.jsonl"


@dataclass
class LensConfig:
    steps: int = 200
    lr: float = 1e-3
    seq_len: int = 128
    batch_size: int = 8
    seed: int = 0
    split: str = "valid"


@dataclass
class OutputConfig:
    dir: str = "runs"
    name: str = ""


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "needle": NeedleConfig,
    "lens": LensConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    needle: NeedleConfig = field(default_factory=NeedleConfig)
    lens: LensConfig = field(default_factory=LensConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str, default):
    raw = raw.strip()
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float) or (default is None):
            if default is None and raw.lower() in ("", "none"):
                return None
            return float(raw)
        if isinstance(default, list):
            return [int(p) for p in raw.replace(" ", "").split(",") if p]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r}") from exc


def _assign(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(obj, key, _coerce(section, key, raw, getattr(type(obj)(), key)))


def _split_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        return section.strip(), name.strip()
    owners = [s for s, cls in SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if len(owners) != 1:
        raise ConfigError(f"override key {key!r} must be written as section.key")
    return owners[0], key


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI file (optional) then apply ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _assign(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(cfg, *_split_key(key.strip()), raw)
    cfg.train.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for k, v in asdict(getattr(cfg, section)).items():
            if isinstance(v, list):
                v = ",".join(str(i) for i in v)
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)
