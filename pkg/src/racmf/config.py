"""Experiment configuration: one JSON/TOML file mirroring each module's
config type, with strict unknown-key rejection and dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .controller import ControllerConfig
from .errors import SpecificationError
from .rl import PPOConfig, RewardConfig
from .rollout import RolloutConfig
from .synth import DegradationSpec, PhantomSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# deterministic per-section seed offsets applied when a section omits its seed
SEED_OFFSETS = {"data": 0, "backbone": 1, "ppo": 2, "rollout": 3, "controller": 4}


@dataclass(frozen=True)
class DataConfig:
    n_pairs: int = 64
    size: tuple[int, int] = (32, 32)
    n_lesions: int = 3
    lesion_radius_range: tuple[float, float] = (2.0, 4.0)
    background_texture_scale: float = 2.0
    intensity_range: tuple[float, float] = (0.05, 0.95)
    base_blur_sigma: float = 0.4
    base_noise_sigma: float = 0.03
    hot_quadrant: int | None = 3
    hot_blur_sigma: float = 1.5
    hot_noise_sigma: float = 0.15
    gain_range: tuple[float, float] = (1.0, 1.0)
    jitter: float = 0.15
    lesion_quadrant: int | None = None
    body_jitter: float = 0.03
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def phantom_template(self) -> PhantomSpec:
        return PhantomSpec(seed=self.seed, size=self.size, n_lesions=self.n_lesions,
                           lesion_radius_range=self.lesion_radius_range,
                           background_texture_scale=self.background_texture_scale,
                           intensity_range=self.intensity_range,
                           lesion_quadrant=self.lesion_quadrant,
                           body_jitter=self.body_jitter)

    def degradation_template(self) -> DegradationSpec:
        return DegradationSpec(base_blur_sigma=self.base_blur_sigma,
                               base_noise_sigma=self.base_noise_sigma,
                               hot_quadrant=self.hot_quadrant,
                               hot_blur_sigma=self.hot_blur_sigma,
                               hot_noise_sigma=self.hot_noise_sigma,
                               gain_range=self.gain_range, jitter=self.jitter)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    n_g: int = 32
    nps_patch_size: int = 8
    nps_lowest_variance_fraction: float = 0.1
    data_range: float = 2.0

    def validate(self) -> None:
        if self.split not in ("train", "val", "test"):
            raise SpecificationError(f"split must be train/val/test, got {self.split!r}")
        if self.nps_patch_size < 8:
            raise SpecificationError("nps_patch_size must be >= 8")
        if not 0 < self.nps_lowest_variance_fraction <= 1:
            raise SpecificationError("nps_lowest_variance_fraction must be in (0, 1]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/racmf"
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.backbone.validate()
        self.rollout.validate()
        self.controller.validate()
        self.ppo.validate()
        self.reward.validate()
        self.eval.validate()
        self.data.phantom_template().validate()
        self.data.degradation_template().validate()

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(cls_field: dataclasses.Field, value):
    default = cls_field.default
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if cls_field.name in ("hot_quadrant", "lesion_quadrant") and isinstance(value, str):
        if value.lower() in ("none", "null", ""):
            return None
        raise SpecificationError(
            f"{cls_field.name}: expected int or null, got {value!r}")
    return value


def _build_section(cls, section: dict, name: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise SpecificationError(f"unknown keys in section {name!r}: {unknown}")
    kwargs = {key: _coerce(known[key], value) for key, value in section.items()}
    return cls(**kwargs)


_SECTIONS = {
    "data": DataConfig,
    "backbone": BackboneConfig,
    "rollout": RolloutConfig,
    "controller": ControllerConfig,
    "ppo": PPOConfig,
    "reward": RewardConfig,
    "eval": EvalConfig,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig; unknown keys are rejected."""
    raw = dict(raw)
    top_known = {"seed", "out_dir"} | set(_SECTIONS)
    unknown = sorted(set(raw) - top_known)
    if unknown:
        raise SpecificationError(f"unknown top-level config keys: {unknown}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise SpecificationError(f"seed must be an integer, got {seed!r}")
    env_seed = os.environ.get("RACMF_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise SpecificationError(f"RACMF_SEED must be an integer, got {env_seed!r}")

    kwargs = {"seed": seed, "out_dir": raw.get("out_dir", "runs/racmf")}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise SpecificationError(f"section {name!r} must be a table/object")
        section = dict(section)
        # unset per-section seeds derive deterministically from the global seed
        field_names = {f.name for f in dataclasses.fields(cls)}
        if name in SEED_OFFSETS and "seed" in field_names and "seed" not in section:
            section["seed"] = seed + SEED_OFFSETS[name]
        if name == "rollout" and "init_seed" not in section:
            section["init_seed"] = seed + SEED_OFFSETS["rollout"]
        kwargs[name] = _build_section(cls, section, name)
    config = ExperimentConfig(**kwargs)
    config.validate()
    return config


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply --set dotted-path overrides (values parsed as JSON when possible)."""
    out = json.loads(json.dumps(raw))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise SpecificationError(f"override {item!r} must look like key.path=value")
        path, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = out
        parts = path.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SpecificationError(f"override path {path!r} crosses a non-table")
        node[parts[-1]] = value
    return out


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a JSON (canonical) or TOML config file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if path.endswith(".toml"):
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    if not isinstance(raw, dict):
        raise SpecificationError("config root must be a JSON object / TOML table")
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)
