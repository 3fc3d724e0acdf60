"""Reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tape` records primitive applications eagerly. Every node stores its
forward value (and whatever the primitive needs for its vector-Jacobian
product); :meth:`Tape.backward` walks the nodes in reverse insertion order.

Volumes are laid out as ``(channels, depth, height, width)``. There is no batch
axis and no implicit broadcasting: binary primitives require equal shapes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's rule."""


class UnsupportedPrimitiveError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: Any = None
    requires_grad: bool = False
    name: str | None = None


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# --------------------------------------------------------------------------
# primitive kernels: forward(values, attrs, record) -> (out, saved)
#                    backward(g, node, values, needs) -> list of grads | None
# --------------------------------------------------------------------------


def _conv3d_fwd(vals, attrs, record):
    x, w, b = vals
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, D, H, W), got shape {x.shape}")
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be (Cout, Cin, kD, kH, kW), got shape {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv3d channel axis mismatch: input has {x.shape[0]} channels, "
            f"weight axis 1 expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias must have shape ({w.shape[0]},), got {b.shape}")
    stride = attrs.get("stride", 1)
    if stride not in (1, 2):
        raise ShapeError(f"conv3d stride must be 1 or 2, got {stride}")
    kd, kh, kw = w.shape[2:]
    pads = attrs.get("padding")
    if pads is None:
        pads = (kd // 2, kh // 2, kw // 2)
    cin = x.shape[0]
    out_dims = []
    for axis, (n, k, p) in enumerate(zip(x.shape[1:], (kd, kh, kw), pads)):
        o = conv_output_size(n, k, stride, p)
        if o < 1:
            raise ShapeError(f"conv3d spatial axis {axis + 1} of size {n} too small for kernel {k}")
        out_dims.append(o)
    do, ho, wo = out_dims
    xp = np.zeros((cin,) + tuple(n + 2 * p for n, p in zip(x.shape[1:], pads)), dtype=x.dtype)
    xp[:, pads[0] : pads[0] + x.shape[1], pads[1] : pads[1] + x.shape[2], pads[2] : pads[2] + x.shape[3]] = x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    col = np.ascontiguousarray(win[:, :do, :ho, :wo].transpose(0, 4, 5, 6, 1, 2, 3))
    col2 = col.reshape(cin * kd * kh * kw, -1)
    out = w.reshape(w.shape[0], -1) @ col2
    out = out.reshape(w.shape[0], do, ho, wo) + b[:, None, None, None]
    saved = (col2, xp.shape, pads, stride) if record else None
    return out, saved


def _input_grad_stride1(g, w, pads, in_dims):
    """Input gradient of a stride-1 conv: correlate ``g`` with the flipped, transposed kernel.

    Padding ``g`` by ``k - 1 - p`` per side makes the output exactly ``in_dims``.
    This avoids materializing the (Cin * k^3, N) column gradient.
    """
    cout, cin = w.shape[:2]
    ks = w.shape[2:]
    back = [k - 1 - p for k, p in zip(ks, pads)]
    gp = np.zeros((cout,) + tuple(n + 2 * b for n, b in zip(g.shape[1:], back)), dtype=g.dtype)
    gp[:, back[0] : back[0] + g.shape[1], back[1] : back[1] + g.shape[2], back[2] : back[2] + g.shape[3]] = g
    d, h, wd = in_dims
    col = np.empty((cout,) + tuple(ks) + (d, h, wd), dtype=g.dtype)
    for a in range(ks[0]):
        for c in range(ks[1]):
            for e in range(ks[2]):
                col[:, a, c, e] = gp[:, a : a + d, c : c + h, e : e + wd]
    wf = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(cin, -1)
    return (wf @ col.reshape(cout * ks[0] * ks[1] * ks[2], -1)).reshape(cin, d, h, wd)


def _conv3d_bwd(g, node, vals, needs):
    x, w, _ = vals
    col2, xp_shape, pads, stride = node.saved
    cout = w.shape[0]
    g2 = g.reshape(cout, -1)
    gx = gw = gb = None
    if needs[1]:
        gw = (g2 @ col2.T).reshape(w.shape)
    if needs[2]:
        gb = g2.sum(axis=1)
    if needs[0]:
        kd, kh, kw = w.shape[2:]
        do, ho, wo = g.shape[1:]
        pd, ph, pw = pads
        if stride == 1 and all(k - 1 - p >= 0 for k, p in zip((kd, kh, kw), pads)):
            gx = _input_grad_stride1(g, w, pads, x.shape[1:])
        else:
            gcol = (w.reshape(cout, -1).T @ g2).reshape(x.shape[0], kd, kh, kw, do, ho, wo)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for a in range(kd):
                for c in range(kh):
                    for e in range(kw):
                        gxp[
                            :,
                            a : a + stride * (do - 1) + 1 : stride,
                            c : c + stride * (ho - 1) + 1 : stride,
                            e : e + stride * (wo - 1) + 1 : stride,
                        ] += gcol[:, a, c, e]
            gx = gxp[:, pd : xp_shape[1] - pd, ph : xp_shape[2] - ph, pw : xp_shape[3] - pw]
    return [gx, gw, gb]


def _upsample2_fwd(vals, attrs, record):
    (x,) = vals
    if x.ndim != 4:
        raise ShapeError(f"upsample2 input must be (C, D, H, W), got shape {x.shape}")
    out = x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    return out, None


def _upsample2_bwd(g, node, vals, needs):
    c, d, h, w = vals[0].shape
    return [g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6))]


def _relu_fwd(vals, attrs, record):
    (x,) = vals
    slope = attrs.get("slope", 0.0)
    if not slope:
        return np.maximum(x, 0), None
    return np.where(x > 0, x, x * np.asarray(slope, x.dtype)), None


def _relu_bwd(g, node, vals, needs):
    slope = node.attrs.get("slope", 0.0)
    if not slope:
        return [g * (vals[0] > 0)]
    return [g * np.where(vals[0] > 0, 1.0, slope).astype(g.dtype, copy=False)]


def _sigmoid_fwd(vals, attrs, record):
    return expit(vals[0]), None


def _sigmoid_bwd(g, node, vals, needs):
    s = node.value
    return [g * s * (1 - s)]


def _softmax_fwd(vals, attrs, record):
    (x,) = vals
    z = np.exp(x - x.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True), None


def _softmax_bwd(g, node, vals, needs):
    s = node.value
    return [s * (g - (g * s).sum(axis=0, keepdims=True))]


def _same_shape(op, a, b):
    if a.shape != b.shape:
        axes = [i for i, (m, n) in enumerate(zip(a.shape, b.shape)) if m != n]
        if a.ndim != b.ndim:
            raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ on axes {axes}")


def _add_fwd(vals, attrs, record):
    _same_shape("add", *vals)
    return vals[0] + vals[1], None


def _add_bwd(g, node, vals, needs):
    return [g, g]


def _mul_fwd(vals, attrs, record):
    _same_shape("mul", *vals)
    return vals[0] * vals[1], None


def _mul_bwd(g, node, vals, needs):
    a, b = vals
    return [g * b if needs[0] else None, g * a if needs[1] else None]


def _div_fwd(vals, attrs, record):
    _same_shape("div", *vals)
    return vals[0] / vals[1], None


def _div_bwd(g, node, vals, needs):
    a, b = vals
    return [g / b if needs[0] else None, -g * a / (b * b) if needs[1] else None]


def _affine_fwd(vals, attrs, record):
    return vals[0] * attrs.get("scale", 1.0) + attrs.get("shift", 0.0), None


def _affine_bwd(g, node, vals, needs):
    return [g * node.attrs.get("scale", 1.0)]


def _concat_fwd(vals, attrs, record):
    ref = vals[0]
    for i, v in enumerate(vals[1:], start=1):
        if v.ndim != ref.ndim or v.shape[1:] != ref.shape[1:]:
            bad = [ax for ax in range(1, ref.ndim) if ax >= v.ndim or v.shape[ax] != ref.shape[ax]]
            raise ShapeError(f"concat: operand {i} shape {v.shape} differs from {ref.shape} on axes {bad}")
    return np.concatenate(vals, axis=0), None


def _concat_bwd(g, node, vals, needs):
    bounds = np.cumsum([v.shape[0] for v in vals])[:-1]
    return np.split(g, bounds, axis=0)


def _norm_axes(attrs, ndim):
    axes = attrs.get("axes")
    if axes is None:
        return tuple(range(ndim))
    return tuple(a % ndim for a in axes)


def _sum_fwd(vals, attrs, record):
    return np.asarray(vals[0].sum(axis=_norm_axes(attrs, vals[0].ndim))), None


def _sum_bwd(g, node, vals, needs):
    x = vals[0]
    axes = _norm_axes(node.attrs, x.ndim)
    return [np.broadcast_to(np.expand_dims(g, axes), x.shape).copy()]


def _mean_fwd(vals, attrs, record):
    return np.asarray(vals[0].mean(axis=_norm_axes(attrs, vals[0].ndim))), None


def _mean_bwd(g, node, vals, needs):
    x = vals[0]
    axes = _norm_axes(node.attrs, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return [np.broadcast_to(np.expand_dims(g / count, axes), x.shape).copy()]


def _take_fwd(vals, attrs, record):
    (x,) = vals
    axis, index = attrs["axis"], attrs["index"]
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"take: index {index} out of range for axis {axis} of size {x.shape[axis]}")
    return np.take(x, index, axis=axis), None


def _take_bwd(g, node, vals, needs):
    x = vals[0]
    gx = np.zeros_like(x)
    idx = [slice(None)] * x.ndim
    idx[node.attrs["axis"]] = node.attrs["index"]
    gx[tuple(idx)] = g
    return [gx]


PRIMITIVES: dict[str, tuple[Callable, Callable, int | None]] = {
    "conv3d": (_conv3d_fwd, _conv3d_bwd, 3),
    "upsample2": (_upsample2_fwd, _upsample2_bwd, 1),
    "relu": (_relu_fwd, _relu_bwd, 1),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd, 1),
    "softmax": (_softmax_fwd, _softmax_bwd, 1),
    "add": (_add_fwd, _add_bwd, 2),
    "mul": (_mul_fwd, _mul_bwd, 2),
    "div": (_div_fwd, _div_bwd, 2),
    "affine": (_affine_fwd, _affine_bwd, 1),
    "concat": (_concat_fwd, _concat_bwd, None),
    "sum": (_sum_fwd, _sum_bwd, 1),
    "mean": (_mean_fwd, _mean_bwd, 1),
    "take": (_take_fwd, _take_bwd, 1),
}


class Tape:
    """Append-only computation graph.

    ``Tape(record=False)`` evaluates forward values without keeping anything
    needed for backward; it is what teacher/inference passes use.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self._overrides: dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.nodes.clear()
        self.params.clear()

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def constant(self, value) -> int:
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("constant contains non-finite values")
        return self._append(Node("constant", (), arr))

    def parameter(self, name: str, value) -> int:
        """Register a named leaf. Re-registering a name returns the existing node."""
        if name in self.params:
            return self.params[name]
        arr = np.asarray(self._overrides.get(name, value))
        node = Node("parameter", (), arr, requires_grad=self.record, name=name)
        self.params[name] = self._append(node)
        return self.params[name]

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def evaluate(self, primitive: str, inputs, **attrs) -> int:
        if primitive not in PRIMITIVES:
            raise UnsupportedPrimitiveError(f"unsupported primitive {primitive!r}")
        fwd, _, arity = PRIMITIVES[primitive]
        inputs = tuple(int(i) for i in inputs)
        if arity is not None and len(inputs) != arity:
            raise ShapeError(f"{primitive} takes {arity} inputs, got {len(inputs)}")
        if not inputs:
            raise ShapeError(f"{primitive} needs at least one input")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} does not exist on this tape")
        vals = [self.nodes[i].value for i in inputs]
        out, saved = fwd(vals, attrs, self.record)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{primitive} produced non-finite values")
        requires = self.record and any(self.nodes[i].requires_grad for i in inputs)
        return self._append(Node(primitive, inputs, out, attrs, saved if requires else None, requires))

    # sugar --------------------------------------------------------------
    def conv3d(self, x, w, b, stride=1, padding=None):
        return self.evaluate("conv3d", (x, w, b), stride=stride, padding=padding)

    def upsample2(self, x):
        return self.evaluate("upsample2", (x,))

    def relu(self, x, slope: float = 0.0):
        """``max(x, 0)``; a nonzero ``slope`` scales the negative side instead (leaky relu)."""
        return self.evaluate("relu", (x,), slope=slope)

    def sigmoid(self, x):
        return self.evaluate("sigmoid", (x,))

    def softmax(self, x):
        return self.evaluate("softmax", (x,))

    def add(self, a, b):
        return self.evaluate("add", (a, b))

    def mul(self, a, b):
        return self.evaluate("mul", (a, b))

    def div(self, a, b):
        return self.evaluate("div", (a, b))

    def affine(self, x, scale=1.0, shift=0.0):
        return self.evaluate("affine", (x,), scale=scale, shift=shift)

    def concat(self, *xs):
        return self.evaluate("concat", xs)

    def sum(self, x, axes=None):
        return self.evaluate("sum", (x,), axes=axes)

    def mean(self, x, axes=None):
        return self.evaluate("mean", (x,), axes=axes)

    def take(self, x, axis, index):
        return self.evaluate("take", (x,), axis=axis, index=index)

    # --------------------------------------------------------------------
    def backward(self, loss: int) -> dict[str, np.ndarray]:
        """Gradients of a scalar node w.r.t. every registered parameter."""
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        root = self.nodes[loss]
        if root.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {root.value.shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(root.value)}
        for idx in range(loss, -1, -1):
            g = grads.pop(idx, None) if self.nodes[idx].op != "parameter" else grads.get(idx)
            node = self.nodes[idx]
            if g is None or not node.inputs:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            needs = [self.nodes[i].requires_grad for i in node.inputs]
            _, bwd, _ = PRIMITIVES[node.op]
            for i, gi, need in zip(node.inputs, bwd(g, node, vals, needs), needs):
                if not need or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for name, idx in self.params.items():
            g = grads.get(idx)
            value = self.nodes[idx].value
            out[name] = np.zeros_like(value) if g is None else np.asarray(g, dtype=value.dtype).reshape(value.shape)
        return out


def _relu_signs(tape: Tape) -> list[np.ndarray]:
    return [tape.nodes[n.inputs[0]].value > 0 for n in tape.nodes if n.op == "relu"]


def grad_check(
    builder,
    rng: np.random.Generator,
    eps: float = 1e-4,
    max_coords: int | None = None,
    stats: dict | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``builder(tape, rng)`` must build a scalar loss and draw every random
    quantity (parameters and data) from ``rng``; it is re-run from the same
    generator state for each perturbation, with parameter values overridden.
    ``max_coords`` limits the check to that many randomly chosen coordinates
    per parameter tensor (the default checks all of them).

    A coordinate whose +-eps perturbation flips the sign of any ReLU input
    straddles a kink, where the function has no derivative and central
    differences measure nothing; it is skipped (and replaced by another
    coordinate when subsampling). ``stats`` receives ``checked`` and
    ``kinks`` counts.
    """
    state = copy.deepcopy(rng)
    picker = np.random.default_rng(0)

    def run(overrides=None):
        tape = Tape()
        tape._overrides = overrides or {}
        loss = builder(tape, copy.deepcopy(state))
        return tape, loss

    tape, loss = run()
    analytic = tape.backward(loss)
    signs = _relu_signs(tape)
    base = {name: tape.value(idx).astype(np.float64) for name, idx in tape.params.items()}
    worst = 0.0
    checked = kinks = 0
    for name, value in base.items():
        coords = list(np.ndindex(value.shape))
        quota = len(coords) if max_coords is None else min(max_coords, len(coords))
        if quota < len(coords):
            coords = [coords[i] for i in picker.permutation(len(coords))]
        done = 0
        for pos in coords:
            if done == quota:
                break
            vals = []
            crossed = False
            for sign in (1.0, -1.0):
                moved = value.copy()
                moved[pos] += sign * eps
                t, l = run({**base, name: moved})
                crossed |= any(not np.array_equal(a, b) for a, b in zip(signs, _relu_signs(t)))
                vals.append(float(t.value(l)))
            if crossed:
                kinks += 1
                continue
            done += 1
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic[name][pos])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        checked += done
    if stats is not None:
        stats.update(checked=checked, kinks=kinks)
    return worst
