"""Slow reference implementations and small builders shared by the tests."""

import numpy as np

from pani import autodiff as ad
from pani.autodiff import Tape, backward_gradients
from pani.interpolation import pani_transform_layer
from pani.neighbors import PeerSet, filter_peers_random, knn_patches
from pani.patches import extract_patches
from pani.selftest import central_difference, conv_loops, knn_brute, relative_error  # noqa: F401


def softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def random_graph(rng):
    """A random small differentiable graph; returns ``(leaves, build)``.

    ``build(values)`` records the graph on a fresh tape and returns
    ``(scalar output, tape)``. Every graph passes through the Pani layer.
    """
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 3))
    s = int(rng.choice([1, 2]))
    h = s * int(rng.integers(2, 4))
    f = int(rng.integers(2, 4))
    classes = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    k1 = int(rng.integers(1, n))
    x = rng.normal(size=(n, c, h, h))
    patches = extract_patches(x, s)
    k2 = int(rng.integers(1, min(4, k1 * patches.num_patches) + 1))
    graph = knn_patches(patches, filter_peers_random(n, k1, rng), k2)
    leaves = {
        "x": x,
        "eta": rng.uniform(-0.6, 0.6, size=graph.shape),
        "w": rng.normal(size=(f, c, 3, 3)) * 0.5,
        "b": rng.normal(size=f) * 0.1,
        "fc": rng.normal(size=(classes, f)),
        "fcb": rng.normal(size=classes) * 0.1,
        "bias_map": rng.normal(size=(1, f, 1, 1)) * 0.1,
    }
    loss_kind = rng.integers(3)
    targets = softmax_rows(rng.normal(size=(n, classes)))
    ref = rng.normal(size=(n, classes))
    gain = float(rng.uniform(0.5, 2.0))

    def build(values):
        tape = Tape()
        v = {k: tape.leaf(a, k) for k, a in values.items()}
        hmap = pani_transform_layer(v["x"], graph, v["eta"], s)
        hmap = ad.conv2d(hmap, v["w"], v["b"], stride, pad + 1)
        hmap = ad.relu(ad.add(hmap, v["bias_map"]))
        feat = ad.scale(ad.global_avg_pool(hmap), gain)
        logits = ad.dense(feat, v["fc"], v["fcb"])
        if loss_kind == 0:
            out = ad.soft_cross_entropy(logits, targets)
        elif loss_kind == 1:
            out = ad.kl_divergence(ref, logits)
        else:
            out = ad.sum_all(ad.mul(ad.log_softmax(logits), ad.log_softmax(logits)))
        return out, tape

    return leaves, build


def gradient_errors(leaves, build, h=1e-5):
    """Per-leaf relative error between backward gradients and central differences."""
    out, tape = build(leaves)
    grads = backward_gradients(tape, out)
    errors = {}
    for name in leaves:
        def f(v, name=name):
            return float(build({**leaves, name: v})[0].value)
        errors[name] = relative_error(grads[name], central_difference(f, leaves[name].copy(), h))
    return errors


def peers(rows):
    return PeerSet(np.asarray(rows, dtype=np.int64))
