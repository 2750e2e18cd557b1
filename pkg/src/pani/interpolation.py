"""Patch-level neighbourhood interpolation and its differentiable layer form.

Each patch moves toward its graph neighbours::

    z~[i,p] = z[i,p] + sum_k eta[i,p,k] * (z[j_k, q_k] - z[i,p])

Neighbour values are always read from the input patches, never from partially
updated outputs, so the result does not depend on evaluation order. The sum is
evaluated as ``(1 - sum_k eta) * z + sum_k eta * neighbour``, which makes the
``eta = 0`` and single-neighbour ``eta = 1`` cases exact.
"""

from __future__ import annotations

import numpy as np

from pani.autodiff import Tape, Var, _tape_of
from pani.errors import DimensionError
from pani.neighbors import NeighborIndex
from pani.patches import PatchSet, check_divisible, patchify, unpatchify


def _check(z_shape, neighbors: NeighborIndex, eta_shape) -> None:
    n, p = z_shape[:2]
    if len(z_shape) != 3:
        raise DimensionError(f"patch data must be [N,P,d], got {z_shape}")
    if neighbors.shape[:2] != (n, p):
        raise DimensionError(f"neighbour index {neighbors.shape} does not match patches [N={n}, P={p}]")
    if tuple(eta_shape) != neighbors.shape:
        raise DimensionError(f"eta shape {tuple(eta_shape)} != neighbour index shape {neighbors.shape}")


def _mix(z: np.ndarray, jj: np.ndarray, qq: np.ndarray, eta: np.ndarray) -> np.ndarray:
    out = z * (1.0 - eta.sum(axis=2))[..., None]
    for k in range(eta.shape[2]):
        out += eta[:, :, k, None] * z[jj[:, :, k], qq[:, :, k]]
    return out


def interpolate_array(z: np.ndarray, neighbors: NeighborIndex, eta: np.ndarray) -> np.ndarray:
    eta = np.asarray(eta, dtype=np.float64)
    _check(z.shape, neighbors, eta.shape)
    return _mix(z, neighbors.image, neighbors.patch, eta)


def interpolate_patches(patches: PatchSet, neighbors: NeighborIndex, eta) -> PatchSet:
    return patches.with_data(interpolate_array(patches.data, neighbors, eta))


def interpolate(z: Var, neighbors: NeighborIndex, eta) -> Var:
    """Tape version of :func:`interpolate_array`, differentiable in ``z`` and ``eta``."""
    tape = _tape_of(z, eta)
    z, eta = tape.lift(z), tape.lift(eta)
    zv, ev = z.value, eta.value
    _check(zv.shape, neighbors, ev.shape)
    jj, qq = neighbors.image, neighbors.patch
    n, p, k = ev.shape

    def vjp(g, needs):
        dz = deta = None
        if needs[1]:
            deta = np.empty_like(ev)
            for kk in range(k):
                deta[:, :, kk] = np.einsum("npd,npd->np", g, zv[jj[:, :, kk], qq[:, :, kk]] - zv)
        if needs[0]:
            dz = g * (1.0 - ev.sum(axis=2))[..., None]
            flat = dz.reshape(n * p, -1)
            for kk in range(k):
                np.add.at(flat, jj[:, :, kk].ravel() * p + qq[:, :, kk].ravel(),
                          (ev[:, :, kk, None] * g).reshape(n * p, -1))
        return dz, deta

    return tape.record("pani_interpolate", _mix(zv, jj, qq, ev), (z, eta), vjp)


def patchify_op(x: Var, s: int) -> Var:
    shape = x.shape
    check_divisible(shape, s)

    def vjp(g, needs):
        return (unpatchify(g, shape, s),)

    return x.tape.record("patchify", np.ascontiguousarray(patchify(x.value, s)), (x,), vjp)


def unpatchify_op(z: Var, shape, s: int) -> Var:
    def vjp(g, needs):
        return (patchify(g, s),)

    return z.tape.record("unpatchify", np.ascontiguousarray(unpatchify(z.value, shape, s)), (z,), vjp)


def pani_transform_layer(feature_map, neighbors: NeighborIndex, eta, patch_size: int):
    """Extract patches, interpolate toward neighbours, and place them back.

    Works on plain arrays (returns an array) or on tape values (returns a Var).
    """
    if isinstance(feature_map, Var) or isinstance(eta, Var):
        tape: Tape = _tape_of(feature_map, eta)
        x = tape.lift(feature_map)
        z = patchify_op(x, patch_size)
        return unpatchify_op(interpolate(z, neighbors, eta), x.shape, patch_size)
    x = np.asarray(feature_map, dtype=np.float64)
    check_divisible(x.shape, patch_size)
    z = interpolate_array(patchify(x, patch_size), neighbors, eta)
    return np.ascontiguousarray(unpatchify(z, x.shape, patch_size))
