"""Run configuration: an INI document with one section per module.

Every section maps onto one config dataclass. Unknown sections or keys are
rejected and every value is range-checked by the dataclass' own validation.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from flap.affordance import AffordanceConfig
from flap.datagen import DatasetConfig
from flap.errors import ConfigError
from flap.finetune import FinetuneConfig
from flap.gcrl import IQLConfig
from flap.planner import PlannerConfig
from flap.experiment.pipeline import BaselineKind, PretrainConfig, TaskConfig

ALPHA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0)


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs/default"
    n_seeds: int = 5
    eval_episodes: int = 10
    methods: tuple[str, ...] = ("FLAP", "MODEL_FREE", "RAW_SPACE_PLANNER")
    ablation_alphas: tuple[float, ...] = ALPHA_GRID

    def validate(self) -> None:
        if self.n_seeds < 1 or self.eval_episodes < 0:
            raise ConfigError("n_seeds must be >= 1 and eval_episodes >= 0")
        for m in self.methods:
            if m not in BaselineKind.__members__:
                raise ConfigError(f"unknown method {m!r}")
        if any(a < 0 for a in self.ablation_alphas):
            raise ConfigError("ablation alphas must be non-negative")


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "data": DatasetConfig,
    "task": TaskConfig,
    "iql": IQLConfig,
    "affordance": AffordanceConfig,
    "pretrain": PretrainConfig,
    "planner": PlannerConfig,
    "finetune": FinetuneConfig,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    iql: IQLConfig = field(default_factory=IQLConfig)
    affordance: AffordanceConfig = field(default_factory=AffordanceConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def validate(self) -> None:
        for name in SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()

    def to_text(self) -> str:
        parser = _parser()
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides; returns a new, validated config."""
        values = _as_dict(self)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            values.setdefault(section, {})[key] = value.strip()
        return from_dict(values)


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names (planner.K)
    return parser


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _as_dict(cfg: RunConfig) -> dict[str, dict[str, str]]:
    return {
        name: {f.name: _format(getattr(getattr(cfg, name), f.name)) for f in dataclasses.fields(getattr(cfg, name))}
        for name in SECTIONS
    }


def _convert(text: str, hint, where: str):
    text = text.strip()
    try:
        if hint is bool:
            low = text.lower()
            if low not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(text)
            return low in {"true", "1", "yes"}
        if hint in (int, float, str):
            return hint(text)
        if typing.get_origin(hint) is tuple:
            inner = typing.get_args(hint)[0]
            return tuple(_convert(part, inner, where) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc
    raise ConfigError(f"{where}: unsupported field type {hint}")


def from_dict(values: dict[str, dict[str, str]]) -> RunConfig:
    kwargs = {}
    for name, raw in values.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        cls = SECTIONS[name]
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
        try:
            kwargs[name] = cls(**{k: _convert(v, hints[k], f"{name}.{k}") for k, v in raw.items()})
        except ValueError as exc:  # raised by frozen dataclasses' own checks
            raise ConfigError(f"[{name}] {exc}") from exc
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def parse_config(text: str) -> RunConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict({s: dict(parser[s]) for s in parser.sections()})


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text())
