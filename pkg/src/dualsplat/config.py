"""Run configuration: nested dataclass schema, strict parsing, overrides.

Configs load from JSON; unknown keys are rejected with their dotted path.
Command-line flags only override existing keys (``a.b.c=value``), so any
run is reproducible from its config file alone.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field as dc_field
from pathlib import Path

from .errors import ConfigValidationError
from .lightfield import LightFieldConfig
from .losses import LossWeights
from .renderer import RenderConfig


@dataclass
class StagePlan:
    """Iteration counts, freezing, and densification for the three stages.

    Stage 2 freezes every scattering group; stage 3 freezes the reflection
    geometry (and, by default, the environment map, superseded by the
    light field).
    """

    stage1_iters: int = 3000
    stage2_iters: int = 2000
    stage3_iters: int = 3000
    densify_interval: int = 100
    densify_until_frac: float = 0.6
    densify_grad_threshold: float = 1e-3
    densify_scale_frac: float = 0.01
    split_scale_factor: float = 1.6
    prune_opacity: float = 0.005
    size_prune_frac: float = 0.25
    max_disks: int = 4000
    densify_stage2: bool = True
    opacity_reset_interval: int = 0          # stage 1; 0 disables
    opacity_reset_interval_stage2: int = 0
    reflectivity_prune: float = 0.02         # stage-2 cleanup of dead-r disks
    env_trainable_stage3: bool = False
    stage3_reflection_model: str = "field"   # "field" | "envmap"

    def stage_iters(self, stage: int) -> int:
        return (self.stage1_iters, self.stage2_iters, self.stage3_iters)[stage - 1]


@dataclass
class OptimizerRates:
    position: float = 1.6e-4
    position_final_frac: float = 0.01   # exponential decay target fraction
    tangent: float = 1e-3
    log_scale: float = 5e-3
    opacity: float = 0.05
    sh: float = 2.5e-3
    refl_attr: float = 5e-3
    env: float = 0.1
    field: float = 5e-4


@dataclass
class ModelConfig:
    sh_degree: int = 3
    sh_ramp_interval: int = 1500   # +1 active SH degree per this many iters
    init_points: int = 800
    init_opacity: float = 0.1
    env_height: int = 64
    fresnel_init: float = 0.04
    reflectivity_init: float = 0.1


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = ""
    seed: int = 0
    threads: int = 1
    log_every: int = 50
    dump_every: int = 0        # 0 disables periodic PNG dumps
    checkpoint_each_stage: bool = True
    model: ModelConfig = dc_field(default_factory=ModelConfig)
    plan: StagePlan = dc_field(default_factory=StagePlan)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    render: RenderConfig = dc_field(default_factory=RenderConfig)
    field: LightFieldConfig = dc_field(default_factory=LightFieldConfig)
    rates: OptimizerRates = dc_field(default_factory=OptimizerRates)


_LEAF_TYPES = (int, float, str, bool, tuple, list, type(None))


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{path or 'config'}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    for key in data:
        if key not in names:
            raise ConfigValidationError(f"unknown config key '{path}{key}'")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value = data[name]
        ftype = hints.get(name)
        if isinstance(ftype, type) and dataclasses.is_dataclass(ftype):
            kwargs[name] = _from_dict(ftype, value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _coerce(old, text):
    if isinstance(old, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigValidationError(f"cannot parse boolean from '{text}'")
    if isinstance(old, int) and not isinstance(old, bool):
        return int(text)
    if isinstance(old, float):
        return float(text)
    if isinstance(old, (tuple, list)):
        return type(old)(float(x) for x in text.split(","))
    return text


def apply_override(cfg: RunConfig, dotted: str):
    """Apply one 'a.b.c=value' override in place."""
    if "=" not in dotted:
        raise ConfigValidationError(f"override '{dotted}' is not key=value")
    key, text = dotted.split("=", 1)
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigValidationError(f"unknown config key '{key}'")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not hasattr(obj, leaf):
        raise ConfigValidationError(f"unknown config key '{key}'")
    setattr(obj, leaf, _coerce(getattr(obj, leaf), text))
    return cfg


def schema_entries(cls=RunConfig, prefix=""):
    """(dotted key, default) for every leaf; drives --help and doc tests."""
    entries = []
    instance = cls()
    for f in dataclasses.fields(cls):
        value = getattr(instance, f.name)
        if dataclasses.is_dataclass(value):
            entries.extend(schema_entries(type(value), f"{prefix}{f.name}."))
        else:
            entries.append((f"{prefix}{f.name}", value))
    return entries
