"""Pipeline configuration: dataclasses loaded from YAML, with named presets and overrides.

Resolution order: built-in defaults < preset < config file < ``--override`` < ``--seed``.
Relative paths in a config file are resolved against the file's directory.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .exceptions import ConfigError

PRESETS = ("toy", "specific-domain", "general-domain", "full-scale")


@dataclass
class DataConfig:
    root: str = ""
    split: str = "train"


@dataclass
class DiffusionConfig:
    image_size: int = 64
    loss_resolution: int | None = None
    T: int = 1000
    schedule: str = "linear"
    sampling_steps: int = 50
    max_objects: Any = "auto"   # N: "auto" = max objects per training image
    channels: tuple = (16, 32, 64, 64)
    attn_levels: tuple = (2, 3)
    text_length: int = 8
    text_dim: int = 64
    image_encoder_channels: Any = None


@dataclass
class FinetuneConfig:
    steps: int = 2000
    lambda_: float = 1.0
    lr: float = 1e-4
    batch_size: int = 16
    log_every: int = 50


@dataclass
class PoolConfig:
    size: int = 16
    batch_size: int = 32


@dataclass
class ControlConfig:
    steps: int = 4000
    gamma: float = 25.0
    lr: float = 1e-4
    batch_size: int = 8
    freeze_base: bool = False
    log_every: int = 50


@dataclass
class SynthesisConfig:
    num_images: int = 200
    batch_size: int = 25


@dataclass
class DiscriminatorConfig:
    patch_size: int = 64
    per_image_bg: int = 2
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    backbone: str = "small-cnn"
    threshold: Any = "auto"


@dataclass
class EvalConfig:
    fid: bool = True
    single_object_layouts: int = 100


@dataclass
class PipelineConfig:
    seed: int = 0
    preset: str | None = None
    work_dir: str = "runs/odgen"
    output_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def section_hash(self, *sections: str) -> str:
        d = self.to_dict()
        blob = json.dumps({s: d.get(s) for s in sections}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir)

    @property
    def export_path(self) -> Path:
        return Path(self.output_dir) if self.output_dir else self.work_path / "export"

    def validate(self) -> "PipelineConfig":
        d = self.diffusion
        if d.image_size % 8:
            raise ConfigError("diffusion.image_size must be divisible by 8")
        if d.loss_resolution not in (None, d.image_size):
            raise ConfigError("the pixel-space model computes its loss at image resolution; "
                              "diffusion.loss_resolution must be null or equal image_size")
        if d.max_objects != "auto" and (not isinstance(d.max_objects, int) or d.max_objects < 1):
            raise ConfigError("diffusion.max_objects must be 'auto' or a positive integer")
        if self.finetune.lambda_ < 0 or self.control.gamma < 0:
            raise ConfigError("lambda and gamma must be non-negative")
        if self.synthesis.num_images < 0:
            raise ConfigError("synthesis.num_images must be >= 0")
        return self


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# YAML spells the reconstruction weight "lambda"; Python cannot.
_KEY_ALIASES = {"lambda": "lambda_"}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = _KEY_ALIASES.get(key, key)
        if key not in names:
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{key}")
        f = names[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value or {}, f"{where}.{key}" if where else key)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in (extra or {}).items():
        key = _KEY_ALIASES.get(key, key)
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("odgen").joinpath(f"presets/{name}.yaml").read_text()
    return _normalize_keys(yaml.safe_load(text) or {})


def _normalize_keys(d):
    if isinstance(d, dict):
        return {_KEY_ALIASES.get(k, k): _normalize_keys(v) for k, v in d.items()}
    return d


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from None
    return [_KEY_ALIASES.get(k, k) for k in key.strip().split(".")], value


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[keys[-1]] = value
    return data


def config_from_dict(data: dict, overrides=None, seed: int | None = None) -> PipelineConfig:
    data = _normalize_keys(data or {})
    merged: dict = {}
    preset = (apply_overrides(data, overrides) or {}).get("preset")
    if preset:
        merged = load_preset(preset)
    merged = _deep_merge(merged, data)
    merged = apply_overrides(merged, overrides)
    if seed is not None:
        merged["seed"] = int(seed)
    return _build(PipelineConfig, merged, "").validate()


def load_config(path, overrides=None, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    base = path.parent.resolve()
    for section, key in (("data", "root"), (None, "work_dir"), (None, "output_dir")):
        node = data.get(section, {}) if section else data
        if isinstance(node, dict) and node.get(key) and not Path(node[key]).is_absolute():
            node[key] = str(base / node[key])
    return config_from_dict(data, overrides, seed)


def dump_config(config: PipelineConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = config.to_dict()
    d["finetune"]["lambda"] = d["finetune"].pop("lambda_")
    with open(path, "w") as fh:
        yaml.safe_dump(d, fh, sort_keys=False)
    return path
