"""Experiment configuration: strict JSON loading, presets and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import DatasetSpec
from .operators import ForwardOperator
from .schedule import ScheduleTable, linear_schedule
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "OperatorConfig",
    "ScheduleConfig",
    "DataConfig",
    "EvalConfig",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "apply_overrides",
    "PRESETS",
]

PRESETS = ("deblur_desk", "superres_desk", "gaussian_oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OperatorConfig:
    kernel_size: int = 7
    kernel_sigma: float = 1.5
    sr_factor: int = 2
    noise_sigma: float = 0.05


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class DataConfig:
    kind: str = "textures"
    count: int = 512
    height: int = 16
    width: int = 16
    channels: int = 1
    prior_std: float = 0.25
    length_scale: float = 0.0
    nugget: float = 1e-4
    gmm_components: int = 2
    gmm_offset: float = 0.3
    fit_shrinkage: float = 1e-3
    val_fraction: float = 0.125


@dataclass(frozen=True)
class EvalConfig:
    seeds: int = 100
    holdout: int | None = None
    curve_every: int = 50
    curve_seeds: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "deblur"
    seed: int = 0
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    control_run: bool = True

    def __post_init__(self):
        if self.task not in ("deblur", "superres"):
            raise ConfigError("task: must be 'deblur' or 'superres'")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError("data.val_fraction: must lie strictly between 0 and 1")
        if self.eval.seeds < 2:
            raise ConfigError("eval.seeds: at least 2 seeds are needed for paired statistics")
        if self.eval.curve_every < 1 or self.eval.curve_seeds < 1:
            raise ConfigError("eval.curve_every and eval.curve_seeds must be >= 1")
        if self.eval.holdout is not None and self.eval.holdout < 1:
            raise ConfigError("eval.holdout: must be >= 1 when set")
        for section, build in (("data", self.dataset_spec), ("operator", self.make_operator), ("schedule", self.make_schedule)):
            try:
                build()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
        if self.task == "superres" and (self.data.height % self.operator.sr_factor or self.data.width % self.operator.sr_factor):
            raise ConfigError("operator.sr_factor: must divide the grid height and width")

    # derived objects
    def make_operator(self) -> ForwardOperator:
        o = self.operator
        if self.task == "deblur":
            return ForwardOperator.gaussian_blur(o.kernel_size, o.kernel_sigma, o.noise_sigma)
        return ForwardOperator.avg_pool(o.sr_factor, o.noise_sigma)

    def make_schedule(self) -> ScheduleTable:
        s = self.schedule
        return linear_schedule(s.T, s.beta_start, s.beta_end)

    def dataset_spec(self) -> DatasetSpec:
        d = dataclasses.asdict(self.data)
        d.pop("val_fraction")
        return DatasetSpec(seed=self.seed, **d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"].pop("seed")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is TrainConfig:
        names.discard("seed")
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "")


def _set_path(d: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    cur[keys[-1]] = value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        _set_path(raw, key.strip(), value)
    return raw


def read_raw(source: str | Path | None) -> dict:
    """Raw dict from a JSON file path or a bundled preset name."""
    if source is None:
        return {}
    if str(source) in PRESETS:
        text = resources.files("udavi.configs").joinpath(f"{source}.json").read_text()
    else:
        p = Path(source)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def load_config(source=None, overrides: list[str] | None = None, seed: int | None = None) -> ExperimentConfig:
    raw = apply_overrides(read_raw(source), overrides or [])
    if seed is not None:
        raw["seed"] = seed
    return config_from_dict(raw)
