"""Run configuration: TOML files plus ``--key value`` overrides.

A run config has top-level ``seed``, ``out`` and ``precision`` keys and the
sections ``[model]``, ``[train]``, ``[data]`` and ``[bench]``. Override keys
are dotted paths (``model.k``) or bare field names when the name is unique
across sections (``k``, ``aggregator``). Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .aggregation import AggregatorKind
from .errors import ConfigError
from .pipeline import ModelConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig

BENCH_AGGREGATORS = ["score_attention", "mean", "max", "logsumexp", "conv1d", "cls"]


def desk_model_config(task: str = "vqa") -> ModelConfig:
    """Desk-scale dimensions; the ModelConfig defaults stay at full scale."""
    return ModelConfig(d=32, heads=4, task=task, max_regions=8, max_question_len=8,
                       max_caption_len=8, feature_width=64, word_dim=32)


@dataclass
class DataConfig:
    """Either synthetic generation (``source = "synthetic"``) or files on disk."""

    source: str = "synthetic"
    train_regions: str = ""
    train_text: str = ""
    test_regions: str = ""
    test_text: str = ""
    # optional JSON maps image id -> match key (retrieval with shared classes)
    train_labels: str = ""
    test_labels: str = ""
    n_train: int = 2000
    n_test: int = 500
    R: int = 8
    L: int = 8
    feature_width: int = 64
    vocab_size: int = 100
    n_classes: int = 20
    signal: float = 4.0
    marker: float = 4.0
    clutter: float = 0.0
    distractors: float = 0.0
    noise: float = 0.7

    def validate(self) -> DataConfig:
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {self.source!r}")
        if self.source == "files":
            for name in ("train_regions", "train_text", "test_regions", "test_text"):
                if not getattr(self, name):
                    raise ConfigError(f"data.{name} is required when data.source = 'files'")
        return self

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        names = {f.name for f in fields(SyntheticSpec)}
        return SyntheticSpec(seed=seed, **{k: v for k, v in dataclasses.asdict(self).items() if k in names})


@dataclass
class BenchConfig:
    aggregators: list[str] = field(default_factory=lambda: list(BENCH_AGGREGATORS))
    ks: list[int] = field(default_factory=lambda: [1])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1  # parallel processes for independent cells

    def validate(self) -> BenchConfig:
        self.aggregators = [AggregatorKind.parse(a).value for a in self.aggregators]
        if not self.seeds:
            raise ConfigError("bench.seeds is empty")
        if any(k < 1 for k in self.ks):
            raise ConfigError("bench.ks must be positive")
        if self.workers < 1:
            raise ConfigError("bench.workers must be >= 1")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    precision: int = 32
    model: ModelConfig = field(default_factory=desk_model_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> RunConfig:
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        self.model.validate()
        self.train.seed = self.seed
        self.train.validate(self.model.task)
        self.data.validate()
        self.bench.validate()
        if self.data.source == "synthetic":
            m, d = self.model, self.data
            if m.feature_width != d.feature_width:
                raise ConfigError(f"model.feature_width {m.feature_width} != data.feature_width {d.feature_width}")
            if m.max_regions < d.R or m.max_text_len < d.L:
                raise ConfigError("model max lengths are shorter than the synthetic R / L")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "bench": BenchConfig}
TOP_LEVEL = {f.name: f for f in fields(RunConfig) if f.name not in SECTIONS}


def _field_type(cls, name: str):
    hints = typing.get_type_hints(cls)
    return hints[name]


def _convert(raw, hint, key: str):
    """Coerce a TOML value or command-line string to the annotated type."""
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.lower() == "none"):
            return None
        return _convert(raw, args[0], key)
    if origin is list:
        (item,) = typing.get_args(hint)
        if isinstance(raw, str):
            raw = [r for r in raw.split(",") if r.strip()]
        if not isinstance(raw, list):
            raise ConfigError(f"{key} expects a list, got {raw!r}")
        return [_convert(r.strip() if isinstance(r, str) else r, item, key) for r in raw]
    try:
        if hint is bool:
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            if isinstance(raw, float) or isinstance(raw, bool):
                raise ValueError(raw)
            return int(raw)
        if hint is float:
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        if hint is str:
            if not isinstance(raw, str):
                raise ValueError(raw)
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported type {hint}")


def _bare_index() -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for name in TOP_LEVEL:
        index.setdefault(name, []).append(name)
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            index.setdefault(f.name, []).append(f"{section}.{f.name}")
    return index


# bare keys that name the same quantity in two sections and set both
LINKED = {"feature_width": ["model.feature_width", "data.feature_width"]}


def resolve_keys(key: str) -> list[str]:
    key = key.replace("-", "_")
    if key in LINKED:
        return LINKED[key]
    return [resolve_key(key)]


def resolve_key(key: str) -> str:
    """Map an override key to its dotted path; top-level names win."""
    key = key.replace("-", "_")
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        return key
    if key in TOP_LEVEL:
        return key
    matches = _bare_index().get(key)
    if not matches:
        raise ConfigError(f"unknown config key {key!r}")
    if len(matches) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {', '.join(matches)}")
    return matches[0]


def set_value(config: RunConfig, key: str, raw) -> None:
    for path in resolve_keys(key):
        _set_path(config, path, raw)


def _set_path(config: RunConfig, path: str, raw) -> None:
    if "." not in path:
        setattr(config, path, _convert(raw, _field_type(RunConfig, path), path))
        return
    section, name = path.split(".", 1)
    target = getattr(config, section)
    setattr(target, name, _convert(raw, _field_type(SECTIONS[section], name), path))


def from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for name, v in value.items():
                set_value(config, f"{key}.{name}", v)
        elif key in TOP_LEVEL:
            set_value(config, key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return config


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the TOML file, then overrides; validated before returning."""
    config = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomli.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        # the task decides the desk defaults of task-dependent fields
        model = data.get("model", {})
        task = model.get("task") if isinstance(model, dict) else None
        if isinstance(task, str):
            config.model.task = task
        from_mapping(data, config)
    for key, value in (overrides or {}).items():
        set_value(config, key, value)
    return config.validate()


def parse_overrides(args: list[str]) -> dict[str, str]:
    """``["--k", "5", "--model.aggregator", "mean"]`` -> ``{"k": "5", ...}``."""
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"expected --key value, got {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for --{key}")
            value = args[i + 1]
            i += 2
        out[key] = value
    return out
