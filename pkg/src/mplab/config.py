"""Run configuration: dataclasses plus TOML-style load/dump with unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomlkit

from .models import ExtractorSpec, HfnSpec

TRAINER_MODES = ("meta", "joint_erm", "fixed_pattern")
PATTERNS = ("identity", "colorlbp")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9  # for theta (and phi in joint_erm); inner steps are plain SGD
    inner_steps: int = 4  # K
    iterations: int = 1500  # T
    batch_per_class: int = 4  # per domain
    mode: str = "meta"
    pattern: str = "identity"  # fixed_pattern only
    seed: int = 0
    log_interval: int = 50
    eval_interval: int = 500  # held-out metrics every this many iterations (0: final only)
    checkpoint_interval: int = 0  # 0: only at the end

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.inner_steps < 0:
            raise ConfigError(f"inner_steps (K) must be >= 0, got {self.inner_steps}")
        if self.iterations < 1:
            raise ConfigError(f"iterations (T) must be >= 1, got {self.iterations}")
        if self.batch_per_class < 1:
            raise ConfigError("batch_per_class must be >= 1")
        if self.mode not in TRAINER_MODES:
            raise ConfigError(f"unknown trainer mode {self.mode!r}; expected one of {TRAINER_MODES}")
        if self.pattern not in PATTERNS:
            raise ConfigError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        if self.eval_interval < 0 or self.checkpoint_interval < 0:
            raise ConfigError("eval_interval and checkpoint_interval must be >= 0")


@dataclass
class DataConfig:
    root: str = ""  # dataset directory with manifest.csv; empty means generate in memory
    domains: int = 4
    per_class: int = 150
    seed: int = -1  # -1: follow train.seed
    resolution: int = 64
    test_domain: str = ""  # held out of `train` and used for the periodic metrics

    def __post_init__(self) -> None:
        if self.domains < 1 or self.per_class < 1:
            raise ConfigError("data.domains and data.per_class must be >= 1")


@dataclass
class BenchConfig:
    fusion_modes: list = field(default_factory=lambda: ["hfm", "concat"])
    trainer_modes: list = field(default_factory=lambda: ["meta", "joint_erm", "fixed_pattern"])
    inner_steps: list = field(default_factory=lambda: [1, 2, 4, 8])  # meta cells only
    patterns: list = field(default_factory=lambda: ["identity", "colorlbp"])  # fixed_pattern cells only
    seeds: list = field(default_factory=lambda: [0])

    def __post_init__(self) -> None:
        for mode in self.trainer_modes:
            if mode not in TRAINER_MODES:
                raise ConfigError(f"unknown trainer mode {mode!r} in [bench]")
        for pat in self.patterns:
            if pat not in PATTERNS:
                raise ConfigError(f"unknown pattern {pat!r} in [bench]")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    hfn: HfnSpec = field(default_factory=HfnSpec)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self) -> None:
        if self.hfn.input_size != self.data.resolution:
            raise ConfigError(
                f"hfn.input_size ({self.hfn.input_size}) must equal data.resolution ({self.data.resolution})"
            )

    @property
    def data_seed(self) -> int:
        return self.train.seed if self.data.seed < 0 else self.data.seed

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"seed": 3})``."""
        d = self.to_dict()
        for name, values in sections.items():
            if name not in d:
                raise ConfigError(f"unknown section {name!r}")
            d[name].update(values)
        return from_dict(d)


_SECTIONS = {"train": TrainConfig, "extractor": ExtractorSpec, "hfn": HfnSpec, "data": DataConfig,
             "bench": BenchConfig}


def _default(f: dataclasses.Field):
    return f.default_factory() if f.default is dataclasses.MISSING else f.default


def _check_type(section: str, f: dataclasses.Field, v: Any) -> None:
    want = type(_default(f))
    if want is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    elif want is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    elif want in (list, tuple):
        ok = isinstance(v, (list, tuple))
    else:
        ok = isinstance(v, want)
    if not ok:
        raise ConfigError(f"[{section}] {f.name} must be {want.__name__}, got {type(v).__name__} {v!r}")


def from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a config, filling defaults and rejecting unknown sections or keys."""
    kwargs = {}
    for name, value in raw.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        if not isinstance(value, dict):
            raise ConfigError(f"[{name}] must be a table")
        cls = _SECTIONS[name]
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(value) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
        for f in dataclasses.fields(cls):
            if f.name in value:
                _check_type(name, f, value[f.name])
        try:
            kwargs[name] = cls(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> RunConfig:
    try:
        doc = tomlkit.parse(text).unwrap()
    except Exception as exc:  # tomlkit raises several parse error types
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return from_dict(doc)


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def dumps(cfg: RunConfig) -> str:
    return tomlkit.dumps(cfg.to_dict())


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
