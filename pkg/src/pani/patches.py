"""Non-overlapping patch decomposition of [N, C, H, W] feature maps.

Patch ``p`` at grid cell ``(r, c)`` has index ``r * (W // s) + c``. Inside a
patch the features are flattened channel-major, then row, then column, so
``d = C * s * s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pani.errors import ContractError, DimensionError


@dataclass(frozen=True)
class PatchSet:
    source_shape: tuple
    patch_size: int
    data: np.ndarray  # [N, P, d]

    @property
    def grid(self) -> tuple:
        _, _, h, w = self.source_shape
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def dim(self) -> int:
        return self.source_shape[1] * self.patch_size ** 2

    def with_data(self, data: np.ndarray) -> "PatchSet":
        return PatchSet(self.source_shape, self.patch_size, data)


def check_divisible(shape, s: int) -> None:
    if len(shape) != 4:
        raise DimensionError(f"expected a [N,C,H,W] map, got shape {tuple(shape)}")
    if s < 1:
        raise DimensionError(f"patch size must be >= 1, got {s}")
    h, w = shape[2], shape[3]
    if h % s or w % s:
        raise DimensionError(f"patch size s={s} does not divide H={h}, W={w}")


def patchify(x: np.ndarray, s: int) -> np.ndarray:
    """[N,C,H,W] -> [N,P,d] without validation wrappers."""
    n, c, h, w = x.shape
    gh, gw = h // s, w // s
    return x.reshape(n, c, gh, s, gw, s).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * s * s)


def unpatchify(z: np.ndarray, shape, s: int) -> np.ndarray:
    """[N,P,d] -> [N,C,H,W]; exact inverse of :func:`patchify`."""
    n, c, h, w = shape
    gh, gw = h // s, w // s
    return z.reshape(n, gh, gw, c, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)


def extract_patches(feature_map: np.ndarray, patch_size: int) -> PatchSet:
    x = np.asarray(feature_map, dtype=np.float64)
    check_divisible(x.shape, patch_size)
    return PatchSet(tuple(x.shape), patch_size, np.ascontiguousarray(patchify(x, patch_size)))


def reconstruct_from_patches(patches: PatchSet) -> np.ndarray:
    shape, s = patches.source_shape, patches.patch_size
    try:
        check_divisible(shape, s)
    except DimensionError as exc:
        raise ContractError(f"inconsistent patch set: {exc}") from exc
    n = shape[0]
    expected = (n, patches.num_patches, patches.dim)
    if patches.data.shape != expected:
        raise ContractError(f"patch data has shape {patches.data.shape}, grid implies {expected}")
    return np.ascontiguousarray(unpatchify(patches.data, shape, s))
