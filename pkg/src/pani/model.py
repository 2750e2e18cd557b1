"""Small fixed convolutional classifier with Pani injection points.

Architecture::

    [tap 0] conv(C->16, 3x3, s1, p1) relu [tap 1] conv(16->32, 3x3, s2, p1) relu
    conv(32->64, 3x3, s2, p1) relu  global-avg-pool  dense(64->64) relu  dense(64->classes)

Tap 0 is the raw input, tap 1 the output of the first block. The post-ReLU
``dense(64)`` activation is the penultimate feature used for peer filtering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from pani import autodiff as ad
from pani.autodiff import Tape, Var
from pani.errors import ConfigError, ContractError
from pani.interpolation import pani_transform_layer
from pani.neighbors import NeighborIndex

TAPS = (0, 1)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (1, 16, 16)
    num_classes: int = 10
    widths: tuple = (16, 32, 64)
    penultimate: int = 64

    def tap_shape(self, tap: int) -> tuple:
        c, h, w = self.input_shape
        if tap == 0:
            return (c, h, w)
        if tap == 1:
            return (self.widths[0], h, w)
        raise ConfigError(f"invalid tap {tap}; valid taps are {TAPS}")


@dataclass
class Injection:
    tap: int
    neighbors: NeighborIndex
    eta: object  # ndarray or Var, shape [N, P, K]
    patch_size: int


class Forward(NamedTuple):
    logits: Var
    penultimate: Var
    tapped: dict
    tape: Tape


def param_shapes(cfg: ModelConfig) -> dict:
    c = cfg.input_shape[0]
    w1, w2, w3 = cfg.widths
    return {
        "conv1.w": (w1, c, 3, 3), "conv1.b": (w1,),
        "conv2.w": (w2, w1, 3, 3), "conv2.b": (w2,),
        "conv3.w": (w3, w2, 3, 3), "conv3.b": (w3,),
        "fc1.w": (cfg.penultimate, w3), "fc1.b": (cfg.penultimate,),
        "fc2.w": (cfg.num_classes, cfg.penultimate), "fc2.b": (cfg.num_classes,),
    }


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """He-normal weights, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def _inject(h, tap: int, inject: Sequence[Injection]):
    for spec in inject:
        if spec.tap == tap:
            h = pani_transform_layer(h, spec.neighbors, spec.eta, spec.patch_size)
    return h


def _param_var(tape: Tape, name: str, value, track: bool) -> Var:
    if isinstance(value, Var):
        return tape.lift(value)
    return tape.leaf(value, name) if track else tape.constant(value)


def forward_with_taps(params: dict, x, inject: Sequence[Injection] = (), tape: Optional[Tape] = None,
                      track_params: bool = True) -> Forward:
    """Run the classifier, applying Pani injections at their taps.

    ``tapped`` holds each tap's feature map before its injections. Parameters
    may be arrays (registered as leaves, or as constants when
    ``track_params=False``) or Vars already living on ``tape``.
    """
    for spec in inject:
        if spec.tap not in TAPS:
            raise ConfigError(f"invalid tap {spec.tap}; valid taps are {TAPS}")
    tape = tape if tape is not None else (x.tape if isinstance(x, Var) else Tape())
    p = {k: _param_var(tape, k, v, track_params) for k, v in params.items()}
    h = tape.lift(x)
    tapped = {0: h}
    h = _inject(h, 0, inject)
    h = ad.relu(ad.conv2d(h, p["conv1.w"], p["conv1.b"], stride=1, pad=1))
    tapped[1] = h
    h = _inject(h, 1, inject)
    h = ad.relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"], stride=2, pad=1))
    h = ad.relu(ad.conv2d(h, p["conv3.w"], p["conv3.b"], stride=2, pad=1))
    h = ad.global_avg_pool(h)
    pen = ad.relu(ad.dense(h, p["fc1.w"], p["fc1.b"]))
    logits = ad.dense(pen, p["fc2.w"], p["fc2.b"])
    return Forward(logits, pen, tapped, tape)


def predict_logits(params: dict, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, x.shape[0], batch_size):
        out.append(forward_with_taps(params, x[start:start + batch_size], track_params=False).logits.value)
    return np.concatenate(out, axis=0)


def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: Optional[dict] = None) -> dict:
    """``v <- momentum*v + g + wd*w``; ``w <- w - lr*v``. ``velocity`` is updated in place."""
    missing = set(params) ^ set(grads)
    if missing:
        raise ContractError(f"params and grads keys differ: {sorted(missing)}")
    velocity = {} if velocity is None else velocity
    new = {}
    for name, w in params.items():
        v = grads[name] + weight_decay * w
        if name in velocity:
            v = momentum * velocity[name] + v
        velocity[name] = v
        new[name] = w - lr * v
    return new


@dataclass
class SGD:
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        return sgd_step(params, grads, lr, self.momentum, self.weight_decay, self.velocity)
