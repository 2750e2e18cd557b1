"""Peer filtering and patch-level k-nearest-neighbour graphs within a batch."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from pani.errors import ConfigError, DimensionError
from pani.patches import PatchSet

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class PeerSet:
    peers: np.ndarray  # [N, K1] int, self excluded

    @property
    def k1(self) -> int:
        return self.peers.shape[1]

    def __len__(self):
        return self.peers.shape[0]


@dataclass(frozen=True)
class NeighborIndex:
    """For every (image i, patch p, rank k): neighbour image j and patch q."""

    image: np.ndarray       # [N, P, K] int
    patch: np.ndarray       # [N, P, K] int
    similarity: np.ndarray  # [N, P, K]

    @property
    def shape(self) -> tuple:
        return self.image.shape


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + COSINE_EPS)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum reduces every pair in the same order, so identical vectors score identically
    return np.einsum("id,jd->ij", a, b)


def top_k_desc(sims: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, descending, ties to lower index."""
    neg = -sims
    if k >= sims.shape[1]:
        return np.argsort(neg, axis=1, kind="stable")
    sel = np.argpartition(neg, k - 1, axis=1)[:, :k]
    picked = np.take_along_axis(neg, sel, axis=1)
    thr = picked.max(axis=1, keepdims=True)
    # rows whose k-th value is tied with an unselected entry need the full stable sort
    ambiguous = np.count_nonzero(neg <= thr, axis=1) > k
    out = np.take_along_axis(sel, _row_lexsort(sel, picked), axis=1)
    if ambiguous.any():
        out[ambiguous] = np.argsort(neg[ambiguous], axis=1, kind="stable")[:, :k]
    return out


def _row_lexsort(idx: np.ndarray, key: np.ndarray) -> np.ndarray:
    # sort by key, then by idx: stable sort on idx first, then stable on key
    first = np.argsort(idx, axis=1, kind="stable")
    second = np.argsort(np.take_along_axis(key, first, axis=1), axis=1, kind="stable")
    return np.take_along_axis(first, second, axis=1)


def _check_k1(n: int, k1: int) -> None:
    if not 1 <= k1 <= n - 1:
        raise ConfigError(f"K1={k1} must satisfy 1 <= K1 <= N-1 = {n - 1}")


def filter_peers_semantic(features: np.ndarray, k1: int) -> PeerSet:
    """The ``k1`` most cosine-similar other images for each row of ``features``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise DimensionError(f"expected [N, D] features, got {features.shape}")
    n = features.shape[0]
    _check_k1(n, k1)
    unit = _unit_rows(features)
    sims = _pairwise(unit, unit)
    np.fill_diagonal(sims, -np.inf)
    order = top_k_desc(sims, k1)
    return PeerSet(order.astype(np.int64))


def filter_peers_random(n: int, k1: int, rng: np.random.Generator) -> PeerSet:
    """Uniform peers without replacement, drawn image by image in index order."""
    _check_k1(n, k1)
    peers = np.empty((n, k1), dtype=np.int64)
    everyone = np.arange(n)
    for i in range(n):
        peers[i] = rng.choice(np.delete(everyone, i), size=k1, replace=False)
    return PeerSet(peers)


def knn_patches(patches: PatchSet, peers: PeerSet, k2: int, workers: int = 1) -> NeighborIndex:
    """Top-``k2`` patches among all patches of each image's peers, by cosine similarity.

    Candidates are enumerated peer by peer (in peer-list order), patch by patch;
    ties keep the lower candidate position.
    """
    z = patches.data
    n, p, _ = z.shape
    if len(peers) != n:
        raise DimensionError(f"peer set covers {len(peers)} images, patch set has {n}")
    pool = peers.k1 * p
    if not 1 <= k2 <= pool:
        raise ConfigError(f"K2={k2} must satisfy 1 <= K2 <= K1*P = {pool}")
    unit = _unit_rows(z)

    def search(i):
        row = peers.peers[i]
        cand = unit[row].reshape(pool, -1)
        sims = _pairwise(unit[i], cand)
        order = top_k_desc(sims, k2)
        return row[order // p], order % p, np.take_along_axis(sims, order, axis=1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            parts = list(pool_exec.map(search, range(n)))
    else:
        parts = [search(i) for i in range(n)]
    image, patch, sim = (np.stack(t) for t in zip(*parts))
    return NeighborIndex(image.astype(np.int64), patch.astype(np.int64), sim)


def write_neighbor_csv(index: NeighborIndex, fh: TextIO, tap: int | None = None, header: bool = True) -> None:
    """Rows ``(i, p, k, j, q, similarity)``, prefixed with ``tap`` when given."""
    writer = csv.writer(fh, lineterminator="\n")
    cols = ["i", "p", "k", "j", "q", "similarity"]
    if header:
        writer.writerow((["tap"] if tap is not None else []) + cols)
    n, p, k = index.shape
    for i in range(n):
        for pi in range(p):
            for ki in range(k):
                row = [i, pi, ki, int(index.image[i, pi, ki]), int(index.patch[i, pi, ki]),
                       format(float(index.similarity[i, pi, ki]), ".17g")]
                writer.writerow(([tap] if tap is not None else []) + row)
