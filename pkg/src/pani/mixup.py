"""Pani MixUp and the vanilla MixUp baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from pani.errors import ConfigError, DimensionError
from pani.interpolation import pani_transform_layer
from pani.neighbors import NeighborIndex, PeerSet, knn_patches
from pani.patches import PatchSet


@dataclass(frozen=True)
class MixConfig:
    a: float = 2.5
    k1: int = 1
    k: int = 1
    patch_size: int = 8
    mask_ratio: float = 0.4

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"Beta shape a must be > 0, got {self.a}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.k1 < 1 or self.k < 1:
            raise ConfigError(f"k1 and k must be >= 1, got {self.k1}, {self.k}")

    @classmethod
    def augmented(cls, **kw) -> "MixConfig":
        return cls(**{"a": 2.0, "patch_size": 16, "mask_ratio": 0.6, **kw})

    @classmethod
    def plain(cls, **kw) -> "MixConfig":
        return cls(**{"a": 2.5, "patch_size": 8, "mask_ratio": 0.4, **kw})


@dataclass
class MixPlan:
    lambda_eff: np.ndarray   # [N]
    eta: np.ndarray          # [N, P, K] in [0, 1]
    neighbors: NeighborIndex
    label_mass: list         # per image: {source image j: mass}
    lambda_drawn: Optional[np.ndarray] = None

    def target_weights(self, n: int) -> np.ndarray:
        """[N, N] matrix W with mixed targets ``W @ Y``."""
        w = np.diag(self.lambda_eff.astype(np.float64))
        for i, mass in enumerate(self.label_mass):
            for j, v in mass.items():
                w[i, j] += v
        return w


def sample_lambda(a: float, rng: np.random.Generator) -> float:
    """Beta(a, 1) draw by inverse CDF."""
    if not a > 0:
        raise ConfigError(f"Beta shape a must be > 0, got {a}")
    return lambda_from_uniform(a, rng.random())


def lambda_from_uniform(a: float, u: float) -> float:
    return float(u ** (1.0 / a))


def scale_to_budget(raw: np.ndarray, lam: float) -> np.ndarray:
    """Rescale ``raw`` [P, K] so that ``sum(eta) / P == 1 - lam``; all-zero input stays zero."""
    raw = np.asarray(raw, dtype=np.float64)
    total = raw.sum()
    if total == 0:
        return np.zeros_like(raw)
    return raw * ((1.0 - lam) * raw.shape[0] / total)


def normalize_coefficients(raw: np.ndarray, lam: float) -> tuple:
    """Budget scaling followed by capping.

    Entries are clamped to 1 and each patch row to a total of 1, keeping every
    mixed patch a convex combination. Returns ``(eta, lambda_eff)`` where
    ``lambda_eff = 1 - sum(eta) / P`` after capping.
    """
    eta = np.minimum(scale_to_budget(raw, lam), 1.0)
    if not eta.any():
        return eta, 1.0
    rows = eta.sum(axis=1)
    over = rows > 1.0
    if over.any():
        eta[over] = eta[over] / rows[over, None]
    return eta, 1.0 - eta.sum() / eta.shape[0]


def build_mix_plan(patches: PatchSet, peers: PeerSet, cfg: MixConfig, rng: np.random.Generator,
                   eta_rng: Optional[np.random.Generator] = None,
                   mask_rng: Optional[np.random.Generator] = None) -> MixPlan:
    """Sample a patch-level mixing plan for every image of the batch.

    Randomness is consumed image by image: ``lambda`` from ``rng``, raw
    coefficients from ``eta_rng`` and the Bernoulli mask from ``mask_rng``
    (both default to ``rng``).
    """
    eta_rng = eta_rng or rng
    mask_rng = mask_rng or rng
    neighbors = knn_patches(patches, peers, cfg.k)
    n, p, k = neighbors.shape
    eta = np.zeros((n, p, k))
    lam_eff = np.ones(n)
    lam_drawn = np.ones(n)
    masses = []
    for i in range(n):
        lam = sample_lambda(cfg.a, rng)
        raw = eta_rng.random((p, k))
        keep = mask_rng.random((p, k)) >= cfg.mask_ratio
        eta[i], lam_eff[i] = normalize_coefficients(raw * keep, lam)
        lam_drawn[i] = lam
        masses.append(aggregate_label_mass(eta[i], neighbors.image[i]))
    return MixPlan(lam_eff, eta, neighbors, masses, lam_drawn)


def aggregate_label_mass(eta_i: np.ndarray, sources_i: np.ndarray) -> dict:
    """Label mass per source image: ``sum over (p, k) with j_pk == j of eta / P``."""
    p = eta_i.shape[0]
    mass: dict = {}
    for j, v in zip(sources_i.ravel().tolist(), (eta_i / p).ravel().tolist()):
        if v:
            mass[j] = mass.get(j, 0.0) + v
    return mass


def apply_mix(batch_inputs: np.ndarray, batch_onehot: np.ndarray, plan: MixPlan, patch_size: int) -> tuple:
    if plan.eta.shape[0] != batch_inputs.shape[0] or batch_onehot.shape[0] != batch_inputs.shape[0]:
        raise DimensionError("plan, inputs and targets disagree on batch size")
    mixed = pani_transform_layer(batch_inputs, plan.neighbors, plan.eta, patch_size)
    targets = plan.lambda_eff[:, None] * batch_onehot
    for i, mass in enumerate(plan.label_mass):
        for j, v in mass.items():
            targets[i] += v * batch_onehot[j]
    return mixed, targets


def vanilla_mixup(batch_inputs: np.ndarray, batch_onehot: np.ndarray, a: float, rng: np.random.Generator,
                  lam: Optional[float] = None) -> tuple:
    """Image-level MixUp with ``lambda ~ Beta(a, a)`` and a random partner per image."""
    n = batch_inputs.shape[0]
    if n < 2:
        raise ConfigError("vanilla MixUp needs a batch of at least 2")
    partner = (np.arange(n) + rng.integers(1, n, size=n)) % n
    if lam is None:
        lam = float(rng.beta(a, a))
    mixed = lam * batch_inputs + (1.0 - lam) * batch_inputs[partner]
    targets = lam * batch_onehot + (1.0 - lam) * batch_onehot[partner]
    return mixed, targets
