"""Quick in-package oracle checks run by ``pani selftest``.

Each check compares a library routine against an independent slow
reference (nested loops, brute force, finite differences, closed forms).
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from pani import autodiff as ad
from pani.autodiff import Tape, backward_gradients, conv2d_forward
from pani.data import IMAGES_MAGIC, encode_idx, parse_idx
from pani.errors import ConfigError
from pani.interpolation import pani_transform_layer
from pani.mixup import MixConfig, build_mix_plan, scale_to_budget
from pani.neighbors import COSINE_EPS, PeerSet, filter_peers_random, knn_patches
from pani.patches import PatchSet, extract_patches, reconstruct_from_patches
from pani.vat import normalize_to_ball, power_iteration, weighted_norm


def conv_loops(x, w, b, stride, pad):
    """Direct cross-correlation by nested loops."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def knn_brute(z, peers, k2):
    """Exhaustive scan: rank (similarity desc, flat candidate index asc)."""
    n, p, _ = z.shape
    norms = np.linalg.norm(z, axis=-1)
    image = np.zeros((n, p, k2), dtype=np.int64)
    patch = np.zeros((n, p, k2), dtype=np.int64)
    for i in range(n):
        for a in range(p):
            cands = []
            for flat, (j, q) in enumerate(itertools.product(peers[i], range(p))):
                sim = float(z[i, a] @ z[j, q]) / ((norms[i, a] + COSINE_EPS) * (norms[j, q] + COSINE_EPS))
                cands.append((-sim, flat, j, q))
            cands.sort()
            for k, (_, _, j, q) in enumerate(cands[:k2]):
                image[i, a, k], patch[i, a, k] = j, q
    return image, patch


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over the whole tensor (0 when both vanish)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def _check_conv(rng) -> bool:
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    return all(np.max(np.abs(conv2d_forward(x, w, b, s, p) - conv_loops(x, w, b, s, p))) < 1e-12
               for s, p in ((1, 0), (1, 1), (2, 1)))


def _check_gradients(rng) -> bool:
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    fc = rng.normal(size=(3, 3))
    eta = rng.uniform(-0.5, 0.5, size=(2, 4, 2))
    graph = knn_patches(extract_patches(x, 2), PeerSet(np.array([[1], [0]])), 2)
    target = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])

    def loss(xv, wv, ev):
        tape = Tape()
        h = pani_transform_layer(tape.leaf(xv, "x"), graph, tape.leaf(ev, "eta"), 2)
        h = ad.relu(ad.conv2d(h, tape.leaf(wv, "w"), tape.constant(b), 1, 1))
        logits = ad.dense(ad.global_avg_pool(h), tape.constant(fc), tape.constant(np.zeros(3)))
        return ad.soft_cross_entropy(logits, target), tape

    out, tape = loss(x, w, eta)
    grads = backward_gradients(tape, out)
    checks = [
        (grads["x"], central_difference(lambda v: float(loss(v, w, eta)[0].value), x.copy())),
        (grads["w"], central_difference(lambda v: float(loss(x, v, eta)[0].value), w.copy())),
        (grads["eta"], central_difference(lambda v: float(loss(x, w, v)[0].value), eta.copy())),
    ]
    return all(relative_error(a, b) < 1e-4 for a, b in checks)


def _check_roundtrip(rng) -> bool:
    for _ in range(20):
        s = int(rng.integers(1, 4))
        x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), s * int(rng.integers(1, 4)),
                             s * int(rng.integers(1, 4))))
        if not np.array_equal(reconstruct_from_patches(extract_patches(x, s)), x):
            return False
    return True


def _check_knn(rng) -> bool:
    for _ in range(10):
        n, p, k1 = 5, 4, 3
        z = rng.normal(size=(n, p, 3))
        z[rng.integers(0, n, 6), rng.integers(0, p, 6)] = z[0, 0]  # exact duplicates force ties
        peers = filter_peers_random(n, k1, rng)
        got = knn_patches(PatchSet((n, 3, 1, p), 1, z), peers, 5)
        img, pat = knn_brute(z, peers.peers, 5)
        if not (np.array_equal(got.image, img) and np.array_equal(got.patch, pat)):
            return False
    return True


def _check_mix_budget(rng) -> bool:
    x = rng.uniform(size=(6, 1, 8, 8))
    cfg = MixConfig(a=2.0, k1=2, k=2, patch_size=4, mask_ratio=0.3)
    for _ in range(20):
        plan = build_mix_plan(extract_patches(x, 4), filter_peers_random(6, 2, rng), cfg, rng)
        total = plan.lambda_eff + np.array([sum(m.values()) for m in plan.label_mass])
        if plan.eta.min() < 0 or plan.eta.max() > 1 or np.max(np.abs(total - 1)) > 1e-9:
            return False
    raw = rng.uniform(size=(4, 2))
    return abs(scale_to_budget(raw, 0.3).sum() / 4 - 0.7) < 1e-12


def _check_ball(rng) -> bool:
    field = [rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 16, 5))]
    m = (1.0, 0.5)
    out = normalize_to_ball(field, m, 2.0)
    rows = normalize_to_ball(field, m, 2.0, per_sample=True)
    return abs(weighted_norm(out, m) - 2.0) / 2.0 < 1e-6 and \
        np.max(np.abs(weighted_norm(rows, m, per_sample=True) - 2.0)) < 2e-6


def _check_power(rng) -> bool:
    h = np.diag([3.0, 1.0])
    d, _ = power_iteration(lambda v: 2 * h @ v, np.array([1.0, 1.0]), 1, 1e-2)
    first = np.allclose(d, np.array([3.0, 1.0]) / np.sqrt(10.0), atol=1e-12)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = q @ np.diag([4.0, 2.0, 1.0, 0.5, 0.2, 0.1]) @ q.T
    d, _ = power_iteration(lambda v: 2 * a @ v, rng.normal(size=6), 10, 1e-2)
    return first and abs(float(d @ q[:, 0])) > 0.99


def _check_idx(rng) -> bool:
    arr = rng.integers(0, 256, size=(3, 5, 4), dtype=np.uint8)
    raw = encode_idx(arr)
    if not np.array_equal(parse_idx(raw, IMAGES_MAGIC), arr):
        return False
    for pos in range(4):
        for bit in (1, 128):
            bad = bytearray(raw)
            bad[pos] ^= bit
            try:
                parse_idx(bytes(bad), IMAGES_MAGIC)
                return False
            except ValueError:
                pass
    return True


CHECKS = (
    ("conv2d matches nested loops", _check_conv),
    ("gradients match central differences", _check_gradients),
    ("patch extract/reconstruct roundtrip", _check_roundtrip),
    ("patch kNN matches exhaustive scan", _check_knn),
    ("mix plan budget and range", _check_mix_budget),
    ("weighted eps-ball equality", _check_ball),
    ("power iteration on quadratics", _check_power),
    ("IDX roundtrip and magic check", _check_idx),
)


def run_selftest(seed: int = 0, out=print) -> bool:
    ok = True
    for name, check in CHECKS:
        try:
            passed = bool(check(np.random.default_rng(seed)))
        except (ValueError, ArithmeticError, ConfigError) as exc:
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        out(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return ok
