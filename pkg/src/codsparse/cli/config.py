"""Experiment configuration: a flat ``dotted.key = value`` file validated into dataclasses.

Grammar (a subset of TOML, so any TOML reader accepts it)::

    # comment
    name = "depth-sweep"
    model.depth = 4
    model.moe.n_experts = 4
    train.lr_peak = 3e-3
    train.grad_clip = "none"          # optional fields take the string "none"
    probes.jacobian = true
    sweep.axis = "depth"
    sweep.values = [2, 4, 8]
    theory.residual.alpha = [0.25, 1.0]

Unknown keys and ill-typed values raise :class:`ConfigError` naming the dotted field.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from ..model.config import ConfigError, ModelConfig, MoEConfig
from ..probes import ATTENTION_THRESHOLDS, WEIGHT_THRESHOLDS
from ..theory import THEOREMS
from ..train import TrainConfig

SWEEP_AXES = ("depth", "weight_decay", "seq_len", "gqa_groups", "moe")
NONE_TOKEN = "none"


@dataclass(frozen=True)
class ProbeSettings:
    weight_thresholds: tuple[float, ...] = WEIGHT_THRESHOLDS
    attention_thresholds: tuple[float, ...] = ATTENTION_THRESHOLDS
    jacobian: bool = True
    attention: bool = True

    def validate(self, prefix: str = "probes") -> None:
        for name in ("weight_thresholds", "attention_thresholds"):
            values = getattr(self, name)
            if not values or any(not v > 0 for v in values):
                raise ConfigError(f"{prefix}.{name}", "needs one or more positive thresholds")


@dataclass(frozen=True)
class EffectivenessSettings:
    enabled: bool = True
    alpha: float = 0.1
    ridge: float = 1e-6
    fit_tokens: int = 4096
    eval_windows: int = 8

    def validate(self, prefix: str = "effectiveness") -> None:
        if not self.alpha > 0:
            raise ConfigError(f"{prefix}.alpha", "must be > 0")
        if not self.ridge >= 0:
            raise ConfigError(f"{prefix}.ridge", "must be >= 0")
        for name in ("fit_tokens", "eval_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple = ()
    seeds: tuple[int, ...] = ()

    def validate(self, prefix: str = "sweep") -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"{prefix}.axis", f"{self.axis!r} is not one of {SWEEP_AXES}")
        if not self.values:
            raise ConfigError(f"{prefix}.values", "needs at least one value")
        for i, v in enumerate(self.values):
            if isinstance(v, bool):
                raise ConfigError(f"{prefix}.values[{i}]", "booleans are not sweep values")
            if self.axis == "weight_decay":
                if not isinstance(v, (int, float)) or not v >= 0:
                    raise ConfigError(f"{prefix}.values[{i}]", f"weight decay must be a number >= 0, got {v!r}")
            elif not isinstance(v, int) or v < 0 or (v == 0 and self.axis != "moe"):
                raise ConfigError(f"{prefix}.values[{i}]", f"{self.axis} values must be positive integers, got {v!r}")
        if len(set(self.values)) != len(self.values):
            raise ConfigError(f"{prefix}.values", "duplicate values would collide in run names")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"{prefix}.seeds", "duplicate seeds")


@dataclass(frozen=True)
class TheorySettings:
    grid: dict = field(default_factory=dict)  # family -> {axis: list}
    trials: dict = field(default_factory=dict)  # family -> trial count
    seed: int = 0
    self_test: bool = False

    def validate(self, prefix: str = "theory") -> None:
        for fam in list(self.grid) + list(self.trials):
            if fam not in THEOREMS:
                raise ConfigError(f"{prefix}.{fam}", f"unknown theorem family; expected one of {THEOREMS}")
        for fam, count in self.trials.items():
            if not isinstance(count, int) or count < 2:
                raise ConfigError(f"{prefix}.trials.{fam}", "must be an integer >= 2")

    @property
    def empty(self) -> bool:
        return not any(self.grid.values())


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelConfig
    train: TrainConfig
    probes: ProbeSettings = ProbeSettings()
    effectiveness: EffectivenessSettings = EffectivenessSettings()
    sweep: SweepSpec | None = None
    theory: TheorySettings | None = None
    output_dir: str = "runs"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _check_type(path: str, value, annotation: str):
    """Coerce ``value`` to the field annotation or raise with the field path."""
    optional = annotation.endswith("| None")
    base = annotation.replace("| None", "").strip()
    if optional and (value is None or value == NONE_TOKEN):
        return None
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if base.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        item = "float" if "float" in base else "int" if "int" in base else None
        if item is None:
            return tuple(value)
        return tuple(_check_type(f"{path}[{i}]", v, item) for i, v in enumerate(value))
    raise ConfigError(path, f"unsupported field type {annotation}")


def _build(cls, raw, prefix: str, skip=()):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, f"expected a section of dotted keys, got {raw!r}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{prefix}.{key}", "unknown field")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _check_type(f"{prefix}.{name}", value, str(fields[name].type))
    missing = [n for n, f in fields.items() if n not in kwargs and f.default is dataclasses.MISSING
               and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"{prefix}.{missing[0]}", "required field missing")
    return kwargs


def _model(raw: dict) -> ModelConfig:
    raw = dict(raw)
    moe_raw = raw.pop("moe", None)
    kwargs = _build(ModelConfig, raw, "model", skip=("moe",))
    moe = None
    if moe_raw is not None:
        moe = MoEConfig(**_build(MoEConfig, moe_raw, "model.moe"))
    return ModelConfig(moe=moe, **kwargs)


def _theory(raw: dict) -> TheorySettings:
    raw = dict(raw)
    trials = raw.pop("trials", {})
    seed = raw.pop("seed", 0)
    self_test = raw.pop("self_test", False)
    _check_type("theory.seed", seed, "int")
    _check_type("theory.self_test", self_test, "bool")
    grid = {}
    for fam, axes in raw.items():
        if fam not in THEOREMS:
            raise ConfigError(f"theory.{fam}", f"unknown theorem family; expected one of {THEOREMS}")
        if not isinstance(axes, dict):
            raise ConfigError(f"theory.{fam}", "expected axis = [values] entries")
        grid[fam] = {}
        for axis, values in axes.items():
            if not isinstance(values, list) or any(isinstance(v, bool) or not isinstance(v, (int, float))
                                                   for v in values):
                raise ConfigError(f"theory.{fam}.{axis}", f"expected a list of numbers, got {values!r}")
            grid[fam][axis] = values
    out = TheorySettings(grid, dict(trials), seed, self_test)
    out.validate()
    return out


TOP_LEVEL = ("name", "output_dir", "model", "train", "probes", "effectiveness", "sweep", "theory")


def config_from_dict(raw: dict) -> ExperimentConfig:
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, "unknown field")
    name = _check_type("name", raw.get("name", "run"), "str")
    if not name or any(c in name for c in "/\\") or name in (".", ".."):
        raise ConfigError("name", f"{name!r} is not a valid directory name")
    if "model" not in raw:
        raise ConfigError("model", "section missing")
    if "train" not in raw:
        raise ConfigError("train", "section missing")
    model = _model(raw["model"])
    train = TrainConfig(**_build(TrainConfig, raw["train"], "train"))
    probes = ProbeSettings(**_build(ProbeSettings, raw.get("probes", {}), "probes"))
    probes.validate()
    eff = EffectivenessSettings(**_build(EffectivenessSettings, raw.get("effectiveness", {}), "effectiveness"))
    eff.validate()
    sweep = None
    if "sweep" in raw:
        sweep = SweepSpec(**_build(SweepSpec, raw["sweep"], "sweep"))
        sweep.validate()
    theory = _theory(raw["theory"]) if "theory" in raw else None
    output_dir = _check_type("output_dir", raw.get("output_dir", "runs"), "str")
    if train.seq_len > model.max_seq_len:
        raise ConfigError("train.seq_len", f"{train.seq_len} exceeds model.max_seq_len={model.max_seq_len}")
    return ExperimentConfig(name, model, train, probes, eff, sweep, theory, output_dir)


def parse_config(text: str) -> ExperimentConfig:
    return config_from_dict(parse_raw(text))


def parse_raw(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<syntax>", str(exc)) from None


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def preset_raw(name: str) -> dict:
    from .presets import preset_layers

    raw: dict = {}
    for layer in preset_layers(name):
        raw = merge(raw, parse_raw(layer))
    return raw


def load_raw(path=None, preset: str | None = None) -> dict:
    """Raw key tree from a preset, a file, or a file layered over a preset."""
    raw = preset_raw(preset) if preset else {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = merge(raw, parse_raw(p.read_text(encoding="utf-8")))
    if not raw:
        raise ConfigError("<config>", "give a config file or a preset")
    return raw


def load_config(path=None, preset: str | None = None) -> ExperimentConfig:
    return config_from_dict(load_raw(path, preset))


def load_theory(path=None, preset: str | None = None) -> tuple[str, str, TheorySettings]:
    """Name, output dir and theorem grid; model and train sections are ignored here."""
    raw = load_raw(path, preset)
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(key, "unknown field")
    name = _check_type("name", raw.get("name", "theory"), "str")
    output_dir = _check_type("output_dir", raw.get("output_dir", "runs"), "str")
    return name, output_dir, _theory(raw.get("theory", {}))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return f'"{NONE_TOKEN}"'
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialise {value!r}")


def _flatten(prefix: str, obj, out: list[str]) -> None:
    if isinstance(obj, dict):
        for key, value in obj.items():
            _flatten(f"{prefix}.{key}" if prefix else key, value, out)
    else:
        out.append(f"{prefix} = {_fmt(obj)}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {"name": cfg.name, "output_dir": cfg.output_dir}
    model = cfg.model.to_dict()
    if model["moe"] is None:
        del model["moe"]
    out["model"] = model
    out["train"] = dataclasses.asdict(cfg.train)
    out["probes"] = dataclasses.asdict(cfg.probes)
    out["effectiveness"] = dataclasses.asdict(cfg.effectiveness)
    if cfg.sweep is not None:
        out["sweep"] = dataclasses.asdict(cfg.sweep)
    if cfg.theory is not None:
        theory = {fam: dict(axes) for fam, axes in cfg.theory.grid.items()}
        theory.update({"seed": cfg.theory.seed, "self_test": cfg.theory.self_test})
        if cfg.theory.trials:
            theory["trials"] = dict(cfg.theory.trials)
        out["theory"] = theory
    return out


def flatten_raw(raw: dict) -> str:
    lines: list[str] = []
    _flatten("", raw, lines)
    return "\n".join(lines) + "\n"


def dump_config(cfg: ExperimentConfig) -> str:
    return flatten_raw(config_to_dict(cfg))
