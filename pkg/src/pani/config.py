"""Experiment configuration: a flat JSON object plus ``key=value`` overrides.

Precedence is defaults < file < overrides. Defaults depend on ``method`` and,
for Pani VAT, on ``variant`` (``input`` / ``hidden``); for Pani MixUp on
``profile`` (``aug`` / ``plain``).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional

from pani.errors import ConfigError
from pani.mixup import MixConfig
from pani.model import ModelConfig
from pani.vat import BALLS, VatConfig, VatLayer

METHODS = ("erm", "mixup", "pani_mixup", "vat", "pani_vat")
GRAPH_METHODS = ("pani_mixup", "pani_vat")
SSL_METHODS = ("vat", "pani_vat")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "erm"
    variant: str = "input"
    profile: str = "plain"
    seed: int = 0
    out: Optional[str] = None
    # data
    data: str = "synthetic"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    num_classes: int = 10
    per_class: int = 200
    image_shape: tuple = (1, 16, 16)
    separation: float = 1.0
    data_noise: float = 0.1
    n_labeled: int = 1000
    n_test: int = 500
    n_unlabeled: Optional[int] = None
    # optimizer
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    labeled_batch_size: Optional[int] = None
    lr_decay_epoch: Optional[int] = None
    lr_decay_factor: float = 0.1
    # VAT family
    eps: float = 2.0
    beta: float = 1.0
    k1: int = 10
    k2: tuple = (10,)
    patch_size: tuple = (2,)
    m: tuple = (1.0,)
    taps: tuple = (0,)
    power_iters: int = 1
    xi: float = 1e-2
    ball: str = "sample"
    # MixUp family
    a: float = 2.5
    k: int = 1
    mask_ratio: float = 0.4
    # output
    record_wall_time: bool = False

    @property
    def decay_epoch(self) -> int:
        return self.lr_decay_epoch if self.lr_decay_epoch is not None else self.epochs // 2

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_shape=tuple(self.image_shape), num_classes=self.num_classes)

    def vat_config(self) -> VatConfig:
        layers = tuple(VatLayer(t, s, w, k2) for t, s, w, k2 in zip(self.taps, self.patch_size, self.m, self.k2))
        return VatConfig(eps=self.eps, beta=self.beta, layers=layers, k1=self.k1,
                         power_iters=self.power_iters, xi=self.xi, ball=self.ball)

    def mix_config(self) -> MixConfig:
        return MixConfig(a=self.a, k1=self.k1, k=self.k, patch_size=self.patch_size[0],
                         mask_ratio=self.mask_ratio)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


# key -> kind used for validation
_KINDS = {
    "method": "str", "variant": "str", "profile": "str", "seed": "int", "out": "opt_str",
    "data": "str", "train_images": "opt_str", "train_labels": "opt_str", "num_classes": "int",
    "per_class": "int", "image_shape": "int_list", "separation": "float", "data_noise": "float",
    "n_labeled": "int", "n_test": "int", "n_unlabeled": "opt_int",
    "lr": "float", "momentum": "float", "weight_decay": "float", "epochs": "int", "batch_size": "int",
    "labeled_batch_size": "opt_int", "lr_decay_epoch": "opt_int", "lr_decay_factor": "float",
    "eps": "float", "beta": "float", "k1": "int", "k2": "int_list", "patch_size": "int_list",
    "m": "float_list", "taps": "int_list", "power_iters": "int", "xi": "float", "ball": "str",
    "a": "float", "k": "int", "mask_ratio": "float", "record_wall_time": "bool",
}
VALID_KEYS = tuple(_KINDS)
_PER_LAYER = ("k2", "patch_size", "m")

METHOD_DEFAULTS = {
    "erm": {},
    "mixup": {"a": 1.0},
    "pani_mixup": {
        "aug": {"patch_size": [16], "a": 2.0, "mask_ratio": 0.6, "k1": 1, "k": 1},
        "plain": {"patch_size": [8], "a": 2.5, "mask_ratio": 0.4, "k1": 1, "k": 1},
    },
    "vat": {"eps": 1.0, "xi": 1e-6, "beta": 1.0, "power_iters": 1},
    "pani_vat": {
        "input": {"taps": [0], "patch_size": [2], "k1": 10, "k2": [10], "m": [1.0], "eps": 2.0},
        "hidden": {"taps": [0, 1], "patch_size": [2, 2], "k1": 10, "k2": [10, 50], "m": [1.0, 0.5], "eps": 2.0},
    },
}


def _coerce(key: str, kind: str, value):
    def bad(path, want, got):
        return ConfigError(f"{path}: expected {want}, got {type(got).__name__} {got!r}")

    def as_int(path, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise bad(path, "int", v)
        return v

    def as_float(path, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise bad(path, "finite number", v)
        return float(v)

    if kind.startswith("opt_"):
        return None if value is None else _coerce(key, kind[4:], value)
    if kind == "str":
        if not isinstance(value, str):
            raise bad(key, "string", value)
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad(key, "bool", value)
        return value
    if kind == "int":
        return as_int(key, value)
    if kind == "float":
        return as_float(key, value)
    if kind in ("int_list", "float_list"):
        conv = as_int if kind == "int_list" else as_float
        items = value if isinstance(value, list) else [value]
        return tuple(conv(f"{key}[{i}]", v) for i, v in enumerate(items))
    raise AssertionError(kind)


def _check_keys(d: dict, where: str) -> None:
    unknown = sorted(set(d) - set(_KINDS))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; valid keys: {', '.join(VALID_KEYS)}")


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def build_config(values: dict, overrides: Optional[list] = None) -> ExperimentConfig:
    """Resolve defaults, then ``values``, then ``overrides`` into a validated config."""
    _check_keys(values, "config file")
    user = dict(values)
    for item in overrides or []:
        key, value = parse_override(item)
        _check_keys({key: value}, "overrides")
        user[key] = value

    method = user.get("method", "erm")
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {METHODS}, got {method!r}")
    defaults = METHOD_DEFAULTS[method]
    if method == "pani_vat":
        variant = user.get("variant", "input")
        if variant not in defaults:
            raise ConfigError(f"variant: expected one of {tuple(defaults)}, got {variant!r}")
        defaults = defaults[variant]
    elif method == "pani_mixup":
        profile = user.get("profile", "plain")
        if profile not in defaults:
            raise ConfigError(f"profile: expected one of {tuple(defaults)}, got {profile!r}")
        defaults = defaults[profile]

    merged = {**defaults, **user}
    resolved = {key: _coerce(key, _KINDS[key], v) for key, v in merged.items()}
    cfg = ExperimentConfig(**resolved)

    n_layers = len(cfg.taps)
    fix = {}
    for key in _PER_LAYER:
        seq = getattr(cfg, key)
        if len(seq) == 1 and n_layers > 1:
            fix[key] = seq * n_layers
        elif len(seq) != n_layers and method == "pani_vat":
            raise ConfigError(f"{key}: {len(seq)} entries for {n_layers} taps")
    if fix:
        cfg = dataclasses.replace(cfg, **fix)
    validate(cfg)
    return cfg


def parse_config(path: Optional[str], overrides: Optional[list] = None) -> ExperimentConfig:
    values = {}
    if path:
        with open(path) as fh:
            try:
                values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return build_config(values, overrides)


def validate(cfg: ExperimentConfig) -> None:
    """Checks that must pass before any training starts."""
    if cfg.data not in ("synthetic", "idx"):
        raise ConfigError(f"data: expected 'synthetic' or 'idx', got {cfg.data!r}")
    if cfg.data == "idx" and not (cfg.train_images and cfg.train_labels):
        raise ConfigError("data=idx needs train_images and train_labels")
    if len(cfg.image_shape) != 3:
        raise ConfigError(f"image_shape: expected [C, H, W], got {list(cfg.image_shape)}")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("batch_size and epochs must be >= 1")
    if cfg.n_labeled < 1:
        raise ConfigError("n_labeled must be >= 1")
    model_cfg = cfg.model_config()
    if cfg.method in GRAPH_METHODS or cfg.method == "mixup":
        if cfg.batch_size < 2:
            raise ConfigError(f"{cfg.method} needs batch_size >= 2")
    if cfg.method == "pani_vat":
        vc = cfg.vat_config()
        batch = labeled_batch_size(cfg) + (cfg.batch_size if cfg.n_unlabeled != 0 else 0)
        if batch <= vc.k1:
            raise ConfigError(f"batch of {batch} images must exceed k1={vc.k1}")
        for layer in vc.layers:
            c, h, w = model_cfg.tap_shape(layer.tap)
            if h % layer.patch_size or w % layer.patch_size:
                raise ConfigError(f"patch_size {layer.patch_size} does not divide tap {layer.tap} map {h}x{w}")
            pool = vc.k1 * (h // layer.patch_size) * (w // layer.patch_size)
            if not 1 <= layer.k2 <= pool:
                raise ConfigError(f"k2={layer.k2} must lie in [1, k1*P={pool}] at tap {layer.tap}")
    elif cfg.method == "pani_mixup":
        mc = cfg.mix_config()
        _, h, w = model_cfg.input_shape
        if h % mc.patch_size or w % mc.patch_size:
            raise ConfigError(f"patch_size {mc.patch_size} does not divide input {h}x{w}")
        if labeled_batch_size(cfg) <= mc.k1:
            raise ConfigError(f"batch of {labeled_batch_size(cfg)} must exceed k1={mc.k1}")
        pool = mc.k1 * (h // mc.patch_size) * (w // mc.patch_size)
        if mc.k > pool:
            raise ConfigError(f"k={mc.k} exceeds k1*P={pool}")
    elif cfg.method == "vat":
        VatConfig(eps=cfg.eps, beta=cfg.beta, power_iters=cfg.power_iters, xi=cfg.xi)
    if cfg.ball not in BALLS:
        raise ConfigError(f"ball: expected one of {BALLS}, got {cfg.ball!r}")


def labeled_batch_size(cfg: ExperimentConfig) -> int:
    size = cfg.labeled_batch_size or cfg.batch_size
    return min(size, cfg.n_labeled)
