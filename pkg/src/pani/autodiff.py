"""Reverse-mode differentiation on a flat tape of float64 numpy arrays.

A :class:`Tape` records every operation in execution order, so parents always
precede children and the backward sweep is a single reverse pass. Values are
plain ``numpy.ndarray`` objects; :class:`Var` is a handle to a tape slot.

The primitive set is deliberately small: conv2d, dense, relu, global average
pooling, log-softmax, add, mul, scale and sum, plus the patch operators
registered by :mod:`pani.interpolation`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pani.errors import ContractError, DimensionError, NonFiniteError

VJP = Callable[[np.ndarray, tuple], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    value: np.ndarray
    vjp: Optional[VJP]
    requires_grad: bool
    name: Optional[str] = None


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Var) else -np.asarray(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var({node.op}#{self.index}, shape={self.shape})"


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        bad = int(np.size(value) - np.count_nonzero(np.isfinite(value)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s)")


class Tape:
    """Append-only record of operations; single owner, not thread-safe."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: set[str] = set()

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str) -> Var:
        """Register a differentiable input under a unique name."""
        if name in self._names:
            raise ContractError(f"duplicate leaf name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        _check_finite(f"leaf {name!r}", value)
        self._names.add(name)
        self.nodes.append(Node("leaf", (), value, None, True, name))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        _check_finite("constant", value)
        self.nodes.append(Node("const", (), value, None, False))
        return Var(self, len(self.nodes) - 1)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Var], vjp: VJP) -> Var:
        _check_finite(op, value)
        idx = tuple(p.index for p in parents)
        req = any(self.nodes[i].requires_grad for i in idx)
        self.nodes.append(Node(op, idx, value, vjp if req else None, req))
        return Var(self, len(self.nodes) - 1)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("operands live on different tapes")
            return x
        return self.constant(x)

    def leaf_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.op == "leaf"]


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a Var")


def backward_gradients(tape: Tape, output: Var, wrt: Optional[Iterable[str]] = None) -> dict:
    """Gradient of the scalar ``output`` with respect to every named leaf.

    Leaves that do not influence ``output`` receive zero arrays.
    """
    if output.tape is not tape:
        raise ContractError("output does not belong to this tape")
    out_value = tape.nodes[output.index].value
    if out_value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out_value.shape}")

    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[output.index] = np.ones_like(out_value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        needs = tuple(nodes[p].requires_grad for p in node.parents)
        for p, gp, need in zip(node.parents, node.vjp(g, needs), needs):
            if need and gp is not None:
                grads[p] = gp if grads[p] is None else grads[p] + gp
        grads[i] = None

    wanted = None if wrt is None else set(wrt)
    result = {}
    for i, node in enumerate(nodes):
        if node.op != "leaf" or (wanted is not None and node.name not in wanted):
            continue
        g = grads[i]
        result[node.name] = np.zeros_like(node.value) if g is None else g
    if wanted is not None and wanted - result.keys():
        raise ContractError(f"unknown leaves {sorted(wanted - result.keys())}")
    return result


# --------------------------------------------------------------------------
# elementwise and reduction primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    sa, sb = a.shape, b.shape
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add: shapes {sa} and {sb} do not broadcast") from exc

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return tape.record("add", value, (a, b), vjp)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    try:
        value = av * bv
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {av.shape} and {bv.shape} do not broadcast") from exc

    def vjp(g, needs):
        return (_unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None)

    return tape.record("mul", value, (a, b), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)

    def vjp(g, needs):
        return (g * c,)

    return a.tape.record("scale", a.value * c, (a,), vjp)


def sum_all(a: Var) -> Var:
    shape = a.shape

    def vjp(g, needs):
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record("sum", np.asarray(a.value.sum()), (a,), vjp)


def relu(a: Var) -> Var:
    mask = a.value > 0

    def vjp(g, needs):
        return (g * mask,)

    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), vjp)


def global_avg_pool(a: Var) -> Var:
    if a.value.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {a.shape}")
    n, c, h, w = a.shape

    def vjp(g, needs):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return a.tape.record("gap", a.value.mean(axis=(2, 3)), (a,), vjp)


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a: Var) -> Var:
    if a.value.ndim != 2:
        raise DimensionError(f"log_softmax expects [N,C], got {a.shape}")
    out = log_softmax_array(a.value)
    p = np.exp(out)

    def vjp(g, needs):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return a.tape.record("log_softmax", out, (a,), vjp)


# --------------------------------------------------------------------------
# dense and convolution


def dense(x: Var, w, b) -> Var:
    """Affine map ``x @ w.T + b`` with ``w`` of shape [out, in]."""
    tape = _tape_of(x, w, b)
    x, w, b = tape.lift(x), tape.lift(w), tape.lift(b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[1] or b.shape != (wv.shape[0],):
        raise DimensionError(f"dense: x{xv.shape}, w{wv.shape}, b{b.shape} are incompatible")

    def vjp(g, needs):
        return (g @ wv if needs[0] else None,
                g.T @ xv if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)

    return tape.record("dense", xv @ wv.T + b.value, (x, w, b), vjp)


def _conv_geometry(x_shape, w_shape, b_shape, stride, pad):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x_shape} and {w_shape}")
    n, c, h, w = x_shape
    f, ck, kh, kw = w_shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != kernel channels (axis 1) {ck}")
    if b_shape != (f,):
        raise DimensionError(f"conv2d: bias shape {b_shape} != ({f},)")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: stride {stride} / pad {pad} out of range")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: padded input (axes 2,3) {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = x_shape
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return img[:, :, pad:pad + h, pad:pad + w]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding, [N,C,H,W] * [F,C,kh,kw] -> [N,F,H',W']."""
    x, w, b = (np.asarray(t, dtype=np.float64) for t in (x, w, b))
    ho, wo = _conv_geometry(x.shape, w.shape, b.shape, stride, pad)
    f, _, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Var:
    tape = _tape_of(x, w, b)
    x, w, b = tape.lift(x), tape.lift(w), tape.lift(b)
    xv, wv = x.value, w.value
    ho, wo = _conv_geometry(xv.shape, wv.shape, b.shape, stride, pad)
    f, _, kh, kw = wv.shape
    cols = _im2col(xv, kh, kw, stride, pad, ho, wo)
    wflat = wv.reshape(f, -1)
    value = (cols @ wflat.T + b.value).reshape(xv.shape[0], ho, wo, f).transpose(0, 3, 1, 2)

    def vjp(g, needs):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dx = _col2im(gflat @ wflat, xv.shape, kh, kw, stride, pad, ho, wo) if needs[0] else None
        dw = (gflat.T @ cols).reshape(wv.shape) if needs[1] else None
        db = gflat.sum(axis=0) if needs[2] else None
        return dx, dw, db

    return tape.record("conv2d", np.ascontiguousarray(value), (x, w, b), vjp)


# --------------------------------------------------------------------------
# losses


def _neg_weighted_mean(logp: Var, weights: np.ndarray, offset: np.ndarray, op: str) -> Var:
    """``sum(weights * (offset - logp)) / N`` as a tape node."""
    n = logp.shape[0]
    value = np.asarray(max(float((weights * (offset - logp.value)).sum() / n), 0.0))

    def vjp(g, needs):
        return (-(g / n) * weights,)

    return logp.tape.record(op, value, (logp,), vjp)


def kl_divergence(logits_ref, logits_pert: Var) -> Var:
    """Batch-mean KL(softmax(ref) || softmax(pert)); ``logits_ref`` is a constant."""
    ref = np.asarray(logits_ref.value if isinstance(logits_ref, Var) else logits_ref, dtype=np.float64)
    if ref.shape != logits_pert.shape:
        raise DimensionError(f"kl_divergence: shapes {ref.shape} and {logits_pert.shape} differ")
    if ref.ndim != 2 or ref.shape[1] < 2:
        raise DimensionError(f"kl_divergence needs [N,C] logits with C >= 2, got {ref.shape}")
    ref_logp = log_softmax_array(ref)
    return _neg_weighted_mean(log_softmax(logits_pert), np.exp(ref_logp), ref_logp, "kl")


def soft_cross_entropy(logits: Var, targets) -> Var:
    """Batch-mean cross-entropy against per-row target distributions."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise DimensionError(f"soft_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-9):
        raise ContractError("every target row must be a probability distribution")
    return _neg_weighted_mean(log_softmax(logits), targets, np.zeros_like(targets), "soft_ce")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
