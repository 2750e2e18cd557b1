"""Pani VAT and the vanilla VAT baseline.

The Pani VAT perturbation is a set of interpolation coefficients ``eta_l``, one
tensor per tapped layer, constrained by ``sum_l ||eta_l||^2 / m_l^2 <= eps^2``.
The search runs in the rescaled variables ``d_l = eta_l / m_l`` where the
constraint is an ordinary L2 ball, so power iteration stays standard. By
default the ball is applied per image (``ball="sample"``); ``ball="batch"``
treats the whole batch field as one vector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from pani import autodiff as ad
from pani.autodiff import Tape, backward_gradients, kl_divergence, soft_cross_entropy
from pani.errors import ConfigError, DegenerateDirectionError, DimensionError
from pani.model import Forward, Injection, forward_with_taps
from pani.neighbors import NeighborIndex, PeerSet, filter_peers_semantic, knn_patches
from pani.patches import extract_patches

log = logging.getLogger(__name__)

BALLS = ("sample", "batch")


@dataclass(frozen=True)
class VatLayer:
    tap: int
    patch_size: int
    m: float
    k2: int


@dataclass(frozen=True)
class VatConfig:
    eps: float = 2.0
    beta: float = 1.0
    layers: tuple = (VatLayer(tap=0, patch_size=2, m=1.0, k2=10),)
    k1: int = 10
    power_iters: int = 1
    xi: float = 1e-2
    ball: str = "sample"

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.power_iters < 1:
            raise ConfigError(f"power_iters must be >= 1, got {self.power_iters}")
        if not self.xi > 0:
            raise ConfigError(f"xi must be > 0, got {self.xi}")
        if self.ball not in BALLS:
            raise ConfigError(f"ball must be one of {BALLS}, got {self.ball!r}")
        if not self.layers:
            raise ConfigError("at least one perturbed layer is required")
        for layer in self.layers:
            if not layer.m > 0:
                raise ConfigError(f"layer weight m must be > 0, got {layer.m}")
        taps = [layer.tap for layer in self.layers]
        if len(set(taps)) != len(taps):
            raise ConfigError(f"duplicate taps {taps}")

    @property
    def m(self) -> tuple:
        return tuple(layer.m for layer in self.layers)

    @classmethod
    def input_variant(cls, **kw) -> "VatConfig":
        return cls(layers=(VatLayer(0, 2, 1.0, 10),), k1=10, eps=2.0, **kw)

    @classmethod
    def hidden_variant(cls, **kw) -> "VatConfig":
        return cls(layers=(VatLayer(0, 2, 1.0, 10), VatLayer(1, 2, 0.5, 50)), k1=10, eps=2.0, **kw)


@dataclass
class PerturbationField:
    etas: list                                   # per layer [N, P_l, K_l]
    direction: Optional[np.ndarray] = None       # final unit direction in rescaled variables
    zero_grad_count: int = 0

    def __len__(self):
        return len(self.etas)


def _as_etas(field) -> list:
    return list(field.etas) if isinstance(field, PerturbationField) else list(field)


def weighted_norm(field, m: Sequence[float], per_sample: bool = False):
    """``sqrt(sum_l ||eta_l||^2 / m_l^2)``; one value per image when ``per_sample``."""
    etas = _as_etas(field)
    if len(etas) != len(m):
        raise DimensionError(f"{len(etas)} layers but {len(m)} weights")
    if per_sample:
        sq = sum((np.reshape(e, (np.shape(e)[0], -1)) ** 2).sum(axis=1) / w ** 2 for e, w in zip(etas, m))
    else:
        sq = sum(float((np.asarray(e) ** 2).sum()) / w ** 2 for e, w in zip(etas, m))
    return np.sqrt(sq)


def normalize_to_ball(field, m: Sequence[float], eps: float, per_sample: bool = False) -> list:
    """Scale the field onto the boundary of the weighted eps-ball."""
    etas = [np.asarray(e, dtype=np.float64) for e in _as_etas(field)]
    norm = weighted_norm(etas, m, per_sample)
    if np.any(np.asarray(norm) == 0):
        raise DegenerateDirectionError("cannot normalize a zero perturbation field")
    if per_sample:
        factor = eps / norm
        return [e * factor.reshape((-1,) + (1,) * (e.ndim - 1)) for e in etas]
    return [e * (eps / norm) for e in etas]


def _normalize(d: np.ndarray, row_wise: bool) -> np.ndarray:
    if row_wise:
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.linalg.norm(d)


def power_iteration(grad_at: Callable[[np.ndarray], np.ndarray], d0: np.ndarray, n_iter: int, xi: float,
                    row_wise: bool = False) -> tuple:
    """Finite-difference power iteration on a divergence with a minimum at zero.

    ``grad_at(probe)`` returns the divergence gradient at ``probe = xi * d``.
    Rows (or the whole vector) whose gradient vanishes keep their previous
    direction. Returns ``(d, zero_count)``.
    """
    d = _normalize(np.asarray(d0, dtype=np.float64), row_wise)
    zero_count = 0
    for _ in range(n_iter):
        g = np.asarray(grad_at(xi * d), dtype=np.float64)
        if row_wise:
            norms = np.linalg.norm(g, axis=1)
            dead = norms == 0
            if dead.any():
                zero_count += int(dead.sum())
                log.warning("power iteration: %d row(s) with zero gradient", int(dead.sum()))
            d = np.where(dead[:, None], d, g / np.where(dead, 1.0, norms)[:, None])
        else:
            norm = np.linalg.norm(g)
            if norm == 0:
                zero_count += 1
                log.warning("power iteration: zero gradient, keeping previous direction")
                continue
            d = g / norm
    return d, zero_count


# --------------------------------------------------------------------------
# graphs


def build_vat_graphs(clean: Forward, cfg: VatConfig) -> tuple:
    """Semantic peer filtering on penultimate features, then one patch graph per layer."""
    peers = filter_peers_semantic(clean.penultimate.value, cfg.k1)
    graphs = []
    for layer in cfg.layers:
        patches = extract_patches(clean.tapped[layer.tap].value, layer.patch_size)
        graphs.append(knn_patches(patches, peers, layer.k2))
    return peers, graphs


def _layout(graphs: Sequence[NeighborIndex]) -> list:
    return [g.shape for g in graphs]


def _flatten(arrays: Sequence[np.ndarray], row_wise: bool) -> np.ndarray:
    n = arrays[0].shape[0]
    if row_wise:
        return np.concatenate([a.reshape(n, -1) for a in arrays], axis=1)
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(flat: np.ndarray, shapes: Sequence[tuple], row_wise: bool) -> list:
    out, start = [], 0
    for shape in shapes:
        if row_wise:
            size = int(np.prod(shape[1:]))
            out.append(flat[:, start:start + size].reshape(shape))
        else:
            size = int(np.prod(shape))
            out.append(flat[start:start + size].reshape(shape))
        start += size
    return out


def compute_pani_vat_perturbation(model, params: dict, batch_inputs: np.ndarray, graphs: Sequence[NeighborIndex],
                                  cfg: VatConfig, rng: np.random.Generator, ref_logits: Optional[np.ndarray] = None,
                                  divergence=kl_divergence) -> PerturbationField:
    """Adversarial interpolation coefficients on the weighted eps-ball.

    The finite-difference probe uses coefficients ``xi * (m_l / max m) * d_l``,
    so a common rescaling of all ``m_l`` leaves the search direction unchanged.
    """
    model = model or forward_with_taps
    if len(graphs) != len(cfg.layers):
        raise DimensionError(f"{len(graphs)} graphs for {len(cfg.layers)} configured layers")
    if ref_logits is None:
        ref_logits = model(params, batch_inputs, track_params=False).logits.value
    shapes = _layout(graphs)
    m_rel = [w / max(cfg.m) for w in cfg.m]
    row_wise = cfg.ball == "sample"

    def grad_at(probe_flat):
        tape = Tape()
        probes = _unflatten(probe_flat, shapes, row_wise)
        names = [f"eta{l}" for l in range(len(probes))]
        inject = [Injection(layer.tap, graph, ad.scale(tape.leaf(probe, name), rel), layer.patch_size)
                  for layer, graph, probe, name, rel in zip(cfg.layers, graphs, probes, names, m_rel)]
        out = model(params, batch_inputs, inject, tape=tape, track_params=False)
        grads = backward_gradients(tape, divergence(ref_logits, out.logits), wrt=names)
        return _flatten([grads[name] for name in names], row_wise)

    d0 = _flatten([rng.standard_normal(shape) for shape in shapes], row_wise)
    d, zero_count = power_iteration(grad_at, d0, cfg.power_iters, cfg.xi, row_wise)
    directions = _unflatten(d, shapes, row_wise)
    etas = normalize_to_ball([w * u for w, u in zip(cfg.m, directions)], cfg.m, cfg.eps, per_sample=row_wise)
    return PerturbationField(etas, direction=d, zero_grad_count=zero_count)


# --------------------------------------------------------------------------
# losses


def supervised_loss(model, params, x: np.ndarray, targets: np.ndarray, tape: Tape):
    out = model(params, x, tape=tape)
    return soft_cross_entropy(out.logits, targets)


def _concat(labeled_x: np.ndarray, unlabeled_x: Optional[np.ndarray]) -> np.ndarray:
    if unlabeled_x is None or len(unlabeled_x) == 0:
        return labeled_x
    return np.concatenate([labeled_x, unlabeled_x], axis=0)


def pani_vat_loss(model, params: dict, labeled_batch: tuple, unlabeled_batch: Optional[np.ndarray],
                  cfg: VatConfig, rng: np.random.Generator, perturbation=None) -> tuple:
    """Supervised cross-entropy plus ``beta`` times the Pani VAT divergence.

    ``labeled_batch`` is ``(inputs, target_distributions)``. The divergence is
    taken over labeled and unlabeled inputs together. Returns
    ``(total, parts)`` where ``total`` is a Var whose tape holds the
    parameter leaves.
    """
    model = model or forward_with_taps
    x_l, t_l = labeled_batch
    tape = Tape()
    pv = {k: tape.leaf(v, k) for k, v in params.items()}
    sup = supervised_loss(model, pv, x_l, t_l, tape)

    x_all = _concat(x_l, unlabeled_batch)
    clean = model(params, x_all, track_params=False)
    ref = clean.logits.value
    _, graphs = build_vat_graphs(clean, cfg)
    if perturbation is None:
        perturbation = compute_pani_vat_perturbation(model, params, x_all, graphs, cfg, rng, ref_logits=ref)
    etas = _as_etas(perturbation)
    inject = [Injection(layer.tap, graph, eta, layer.patch_size)
              for layer, graph, eta in zip(cfg.layers, graphs, etas)]
    pert = model(pv, x_all, inject, tape=tape)
    reg = kl_divergence(ref, pert.logits)
    total = ad.add(sup, ad.scale(reg, cfg.beta))
    parts = {"supervised": float(sup.value), "vat_reg": float(reg.value), "field": perturbation}
    return total, parts


def compute_vat_perturbation(model, params: dict, x: np.ndarray, eps: float, power_iters: int, xi: float,
                             rng: np.random.Generator, ref_logits: Optional[np.ndarray] = None) -> np.ndarray:
    """Vanilla VAT: additive input perturbation with L2 norm ``eps`` per image."""
    model = model or forward_with_taps
    if ref_logits is None:
        ref_logits = model(params, x, track_params=False).logits.value
    n = x.shape[0]

    def grad_at(probe_rows):
        tape = Tape()
        r = tape.leaf(probe_rows.reshape(x.shape), "r")
        out = model(params, ad.add(tape.constant(x), r), tape=tape, track_params=False)
        return backward_gradients(tape, kl_divergence(ref_logits, out.logits), wrt=["r"])["r"].reshape(n, -1)

    d, _ = power_iteration(grad_at, rng.standard_normal((n, int(np.prod(x.shape[1:])))), power_iters, xi,
                           row_wise=True)
    return (eps * d).reshape(x.shape)


def vanilla_vat_loss(model, params: dict, labeled_batch: tuple, unlabeled_batch: Optional[np.ndarray],
                     eps: float, beta: float, power_iters: int, xi: float, rng: np.random.Generator,
                     perturbation: Optional[np.ndarray] = None) -> tuple:
    model = model or forward_with_taps
    x_l, t_l = labeled_batch
    tape = Tape()
    pv = {k: tape.leaf(v, k) for k, v in params.items()}
    sup = supervised_loss(model, pv, x_l, t_l, tape)

    x_all = _concat(x_l, unlabeled_batch)
    ref = model(params, x_all, track_params=False).logits.value
    if perturbation is None:
        perturbation = compute_vat_perturbation(model, params, x_all, eps, power_iters, xi, rng, ref_logits=ref)
    pert = model(pv, x_all + perturbation, tape=tape)
    reg = kl_divergence(ref, pert.logits)
    total = ad.add(sup, ad.scale(reg, beta))
    parts = {"supervised": float(sup.value), "vat_reg": float(reg.value), "perturbation": perturbation}
    return total, parts
