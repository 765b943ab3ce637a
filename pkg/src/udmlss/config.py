"""Flat JSON experiment configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

from .errors import ConfigError
from .losses import ALTERNATE_KINDS, LossHyper
from .model import BackboneSpec


@dataclass
class ExperimentConfig:
    # clustering
    k: int = 100
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-6
    # objective
    eta: float = 0.1
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 1.0
    eps: float = 0.1
    loss: str = "ms"
    margin: Optional[float] = None
    ms_reduction: str = "sum"
    # batches
    P: int = 14
    M: int = 5
    rot_unique: int = 16
    rot_augment: str = "crop"
    # optimisation
    lr: float = 1e-3
    epochs: int = 15
    seed: int = 0
    dtype: str = "float32"
    # model
    backbone: str = "small_conv"
    widths: list = field(default_factory=lambda: [16, 32, 64])
    d_embed: int = 32
    input_mean: float = 0.5
    input_std: float = 0.1
    # data
    dataset: str = "synth"
    data_seed: Optional[int] = None
    synth_classes: int = 8
    synth_per_class: int = 200
    synth_heldout_per_class: int = 50
    image_size: int = 32
    synth_noise: float = 0.05
    synth_brightness: list = field(default_factory=lambda: [0.5, 0.5])
    synth_contrast: list = field(default_factory=lambda: [0.04, 0.08])
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    idx_heldout_images: Optional[str] = None
    idx_heldout_labels: Optional[str] = None
    # bookkeeping
    checkpoint_every: int = 5
    recall_ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.k >= 1, "k must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.beta > 0, "beta must be > 0"),
            (self.eps >= 0, "eps must be >= 0"),
            (self.eta >= 0, "eta must be >= 0"),
            (self.P >= 2 and self.M >= 2, "P and M must be >= 2 so batches hold positives and negatives"),
            (self.d_embed >= 1, "d_embed must be >= 1"),
            (self.rot_unique >= 1, "rot_unique must be >= 1"),
            (self.loss in ("ms",) + ALTERNATE_KINDS, f"loss must be one of {('ms',) + ALTERNATE_KINDS}"),
            (self.ms_reduction in ("sum", "mean"), "ms_reduction must be 'sum' or 'mean'"),
            (self.rot_augment in ("full", "crop", "none"), "rot_augment must be 'full', 'crop' or 'none'"),
            (self.dtype in ("float32", "float64"), "dtype must be 'float32' or 'float64'"),
            (self.backbone in ("small_conv", "mlp"), "backbone must be 'small_conv' or 'mlp'"),
            (self.dataset in ("synth", "idx"), "dataset must be 'synth' or 'idx'"),
            (self.checkpoint_every >= 1, "checkpoint_every must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.image_size >= 16, "image_size must be >= 16"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def hyper(self) -> LossHyper:
        return LossHyper(self.alpha, self.beta, self.lam, self.eps, self.eta, self.margin)

    @property
    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.backbone, tuple(int(w) for w in self.widths), 1, self.image_size,
                            self.input_mean, self.input_std)

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), **changes})

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


_HINTS = get_type_hints(ExperimentConfig)


def _coerce(key: str, value):
    hint = _HINTS[key]
    optional = get_origin(hint) is Union and type(None) in get_args(hint)
    base = next(a for a in get_args(hint) if a is not type(None)) if optional else hint
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: null not allowed, expected {base.__name__}")
    if base is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if base is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if base is str and isinstance(value, str):
        return value
    if base is list and isinstance(value, list):
        return value
    raise ConfigError(f"{key}: expected {base.__name__}, got {type(value).__name__} {value!r}")


def from_dict(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_HINTS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    key = key.strip()
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the JSON object at ``path`` (if any), then ``key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"{path}: not UTF-8 ({exc})") from None
        try:
            raw = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    raw = dict(raw)
    for item in overrides:
        key, value = parse_override(item)
        raw[key] = value
    return from_dict(raw)
