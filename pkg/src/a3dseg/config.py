"""Experiment configuration: one YAML file with strict nested sections.

Schema (every key optional, unknown keys are errors)::

    data:
      out_dir: <path>          # where gen-data writes, train-* read the manifest
      n_low: 200
      n_high: 200
      n_test: 20               # per domain
      phantom: {volume_shape, spacing_mm, n_vertebrae, intensity_ranges, seed}
      degradation: {noise_sigma, n_streaks, streak_amplitude, contrast_gamma, metal_prob}
    net: {image_size, base_channels, ..., aade: {hidden_channels, eps, shared_heads}}
    train2d: {ablation, epochs, lr, batch_size, weights: {w_adv, ...}, seed, ...}
    train3d: {patch_shape, downsample_spacing_mm, iterations, lr, seed, ...}
    eval: {mode: 2d|3d, which: y_lh}

Precedence is flags > file > defaults. ``resolve`` returns plain dicts so the
fully resolved config can be written next to every run's outputs.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .aade import AADEParams
from .errors import ConfigError
from .losses import LossWeights
from .nets import NetworkConfig
from .phantom import DegradationParams, PhantomConfig
from .seg3d import TrainConfig3D
from .train2d import TrainConfig2D

OUT_ENV = "A3DSEG_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


@dataclass
class DataConfig:
    out_dir: str = ""
    n_low: int = 200
    n_high: int = 200
    n_test: int = 20
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    degradation: DegradationParams = field(default_factory=DegradationParams)


@dataclass
class EvalConfig:
    mode: str = "2d"
    which: str = "y_lh"


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    train2d: TrainConfig2D = field(default_factory=TrainConfig2D)
    train3d: TrainConfig3D = field(default_factory=TrainConfig3D)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def validate(self) -> "ExperimentConfig":
        self.data.phantom.validate()
        self.data.degradation.validate()
        if min(self.data.n_low, self.data.n_high) < 1 or self.data.n_test < 0:
            raise ConfigError("data needs n_low, n_high >= 1 and n_test >= 0")
        self.net.validate()
        self.train2d.validate()
        self.train3d.validate()
        if self.eval.mode not in ("2d", "3d"):
            raise ConfigError(f"eval.mode must be 2d or 3d, got {self.eval.mode!r}")
        return self


# nested dataclass fields that are not expressible from the annotation string
_NESTED = {
    (DataConfig, "phantom"): PhantomConfig,
    (DataConfig, "degradation"): DegradationParams,
    (NetworkConfig, "aade"): AADEParams,
    (TrainConfig2D, "weights"): LossWeights,
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "net"): NetworkConfig,
    (ExperimentConfig, "train2d"): TrainConfig2D,
    (ExperimentConfig, "train3d"): TrainConfig3D,
    (ExperimentConfig, "eval"): EvalConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(values).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None and name != "intensity_ranges":
            value = _build(sub, value, path)
        elif name == "intensity_ranges":
            if not isinstance(value, dict) or set(value) != {"air", "tissue", "bone"}:
                raise ConfigError(f"{path} needs exactly air, tissue and bone")
            value = {k: tuple(v) for k, v in value.items()}
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "intensity_ranges":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty key in override {text!r}")
    out = value
    for p in reversed(parts):
        out = {p: out}
    return out


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then each override dict in order."""
    values = ExperimentConfig().to_dict()
    if path is not None:
        file_values = load_file(path)
        _build(ExperimentConfig, file_values, "")  # strict key check against the file itself
        values = _merge(values, file_values)
    for o in overrides:
        _build(ExperimentConfig, o, "")
        values = _merge(values, o)
    return _build(ExperimentConfig, values, "").validate()


def dump(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
    return path

